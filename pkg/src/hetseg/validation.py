"""Input checks shared by the estimator and the harness."""
import numpy as np

from .labelspace import LabelScheme, SchemeError, check_labels


def check_images(X, name="X") -> np.ndarray:
    """Return images as float32 ``(N, H, W, C)``; a 3-d input gains a channel axis."""
    X = np.asarray(X)
    if X.dtype.kind not in "fiu":
        raise TypeError(f"{name} must be numeric, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be (N, H, W) or (N, H, W, C), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or inf")
    return X


def check_label_maps(y, scheme: LabelScheme, X=None, name="y", base_only=False) -> np.ndarray:
    """Return label maps as uint8 ``(N, H, W)`` after checking ids against ``scheme``."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[-1] == 1:
        y = y[..., 0]
    if y.ndim != 3:
        raise ValueError(f"{name} must be (N, H, W), got shape {y.shape}")
    if X is not None and y.shape != X.shape[:3]:
        raise ValueError(f"{name} shape {y.shape} does not match images {X.shape[:3]}")
    y = check_labels(y, scheme)
    if base_only and (y >= scheme.num_base_labels).any():
        raise SchemeError(f"{name} contains super label ids; fully annotated maps are required")
    return y.astype(np.uint8)
