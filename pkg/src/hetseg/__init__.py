"""Segmentation training with heterogeneously labeled data (super labels)."""

__version__ = "0.1.0"

from .labelspace import LabelScheme, SuperLabel, mask_from_labels, merge_labels, relabel_permute
from .losses import Batch, LossResult, naive_loss, slac_loss, xent_loss
from .estimator import SuperLabelSegmenter
from .synthdata import adjacent_scheme, generate_scene, heart_scheme

__all__ = [
    "Batch",
    "LabelScheme",
    "LossResult",
    "SuperLabel",
    "SuperLabelSegmenter",
    "adjacent_scheme",
    "generate_scene",
    "heart_scheme",
    "mask_from_labels",
    "merge_labels",
    "naive_loss",
    "relabel_permute",
    "slac_loss",
    "xent_loss",
]
