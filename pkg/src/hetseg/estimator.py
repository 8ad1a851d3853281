"""scikit-learn style wrapper around the segmentation network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import segmodel
from .labelspace import LabelScheme
from .losses import LOSS_KINDS, Batch, compute_loss
from .metrics import evaluate_predictions
from .tensorcore import softmax_channels
from .validation import check_images, check_label_maps


class SuperLabelSegmenter(ClassifierMixin, BaseEstimator):
    """Pixelwise classifier trainable on label maps that mix base and super labels.

    Parameters
    ----------
    scheme : LabelScheme
        Base labels and super labels the training maps may use.
    loss : {"xent", "naive", "slac"}
        Training objective. ``slac`` uses super-label pixels, ``naive`` ignores
        them, ``xent`` requires fully annotated maps.
    depth, base_channels, skip :
        Encoder-decoder shape.
    epochs, batch_size, lr, eval_every :
        Mini-batch Adam schedule. The epoch with the lowest validation loss
        is kept.
    validation_fraction : float
        Share of the training items held out for model selection when
        ``fit`` gets no explicit validation set.
    random_state : int
        Seeds weight init and batch order.
    """

    def __init__(self, scheme=None, loss="slac", depth=2, base_channels=16, skip=True,
                 epochs=30, batch_size=8, lr=0.01, eval_every=1, validation_fraction=0.2,
                 random_state=0, verbose=False):
        self.scheme = scheme
        self.loss = loss
        self.depth = depth
        self.base_channels = base_channels
        self.skip = skip
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.eval_every = eval_every
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def _scheme(self, y=None) -> LabelScheme:
        if self.scheme is not None:
            return self.scheme
        if y is None:
            raise ValueError("scheme is required")
        # no scheme given: every id seen is a base label
        return LabelScheme(int(np.max(y)) + 1)

    def fit(self, X, y, X_val=None, y_val=None):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        X = check_images(X)
        scheme = self._scheme(y)
        y = check_label_maps(y, scheme, X, base_only=self.loss == "xent")
        if X_val is None:
            n_val = int(round(self.validation_fraction * len(X)))
            if not 1 <= n_val < len(X):
                raise ValueError("need an explicit validation set or a usable validation_fraction")
            perm = np.random.default_rng(self.random_state).permutation(len(X))
            X, X_val, y, y_val = X[perm[n_val:]], X[perm[:n_val]], y[perm[n_val:]], y[perm[:n_val]]
        else:
            X_val = check_images(X_val, "X_val")
            y_val = check_label_maps(y_val, scheme, X_val, "y_val", base_only=self.loss == "xent")
        config = segmodel.TrainConfig(
            arm="ub", loss=self.loss, epochs=self.epochs, batch_size=self.batch_size,
            seed=self.random_state, lr=self.lr, eval_every=self.eval_every,
            depth=self.depth, base_channels=self.base_channels, skip=self.skip,
        )
        self.model_, self.training_log_ = segmodel.train(config, X, y, X_val, y_val, scheme,
                                                         verbose=self.verbose)
        self.scheme_ = scheme
        self.classes_ = np.arange(scheme.num_base_labels)
        self.n_features_in_ = X.shape[-1]
        self.best_validation_loss_ = self.training_log_.best_val_loss
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw logits ``(N, H, W, C)`` in float64."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        out = [segmodel.forward(self.model_, X[i:i + self.batch_size])
               for i in range(0, len(X), self.batch_size)]
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_channels(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=-1)

    def loss_value(self, X, y) -> float:
        """The training objective on ``(X, y)``, averaged over all pixels."""
        check_is_fitted(self, "model_")
        y = check_label_maps(y, self.scheme_)
        return compute_loss(self.loss, Batch(self.decision_function(X), y, self.scheme_)).value

    def evaluate(self, X, y, arm=""):
        """Per-structure Dice / ASSD / HD report against fully annotated ``y``."""
        check_is_fitted(self, "model_")
        y = check_label_maps(y, self.scheme_, base_only=True)
        return evaluate_predictions(self.predict(X), y, self.scheme_, arm=arm)

    def score(self, X, y, sample_weight=None):
        """Mean Dice over the non-background structures."""
        return self.evaluate(X, y).average.dsc_mean

    def save(self, path):
        """Write the selected network and its optimizer state as an HSEGCKPT file."""
        check_is_fitted(self, "model_")
        log = self.training_log_
        segmodel.save_checkpoint(path, self.model_, log.best_state, log.best_epoch,
                                 log.best_val_loss)
