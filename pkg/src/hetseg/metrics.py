"""Per-structure segmentation metrics: Dice, ASSD and Hausdorff distance.

Surface distances are measured between 4-connected boundary pixel sets. The
default path finds nearest boundary pixels with an exact Euclidean distance
transform; ``method="brute"`` compares every boundary pair and serves as the
oracle. Both paths compute each distance from integer pixel offsets in the
same way, so they agree exactly.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .labelspace import LabelScheme, SchemeError

REPORT_COLUMNS = ("arm", "structure", "dsc_mean", "dsc_std", "assd_mean", "assd_std",
                  "hd_mean", "hd_std", "n_items", "n_excluded")


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _spacing(spacing) -> tuple:
    if np.ndim(spacing) == 0:
        return float(spacing), float(spacing)
    sy, sx = spacing
    return float(sy), float(sx)


def dice(a, b) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1.0."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary_pixels(mask) -> np.ndarray:
    """``(N, 2)`` row-major coordinates of occupied pixels with an unoccupied 4-neighbour.

    Pixels on the image border count as having an unoccupied neighbour outside.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _dist(offsets: np.ndarray, sy: float, sx: float) -> np.ndarray:
    dy = offsets[:, 0].astype(np.float64) * sy
    dx = offsets[:, 1].astype(np.float64) * sx
    return np.sqrt(dy * dy + dx * dx)


def _directed_edt(src: np.ndarray, dst: np.ndarray, shape, sy, sx) -> np.ndarray:
    # nearest dst boundary pixel for every pixel, then distance from integer offsets
    field_ = np.ones(shape, dtype=bool)
    field_[dst[:, 0], dst[:, 1]] = False
    _, (iy, ix) = ndimage.distance_transform_edt(field_, sampling=(sy, sx), return_indices=True)
    near = np.stack([iy[src[:, 0], src[:, 1]], ix[src[:, 0], src[:, 1]]], axis=1)
    return _dist(src - near, sy, sx)


def _directed_brute(src: np.ndarray, dst: np.ndarray, sy, sx) -> np.ndarray:
    out = np.empty(len(src), dtype=np.float64)
    for i, p in enumerate(src):
        out[i] = _dist(dst - p, sy, sx).min()
    return out


def surface_distances(a, b, spacing=1.0, method: str = "edt"):
    """Directed boundary distances ``(a -> b, b -> a)``, or ``None`` if either mask is empty."""
    a, b = _pair(a, b)
    sy, sx = _spacing(spacing)
    A, B = boundary_pixels(a), boundary_pixels(b)
    if len(A) == 0 or len(B) == 0:
        return None
    if method == "edt":
        return _directed_edt(A, B, a.shape, sy, sx), _directed_edt(B, A, a.shape, sy, sx)
    if method == "brute":
        return _directed_brute(A, B, sy, sx), _directed_brute(B, A, sy, sx)
    raise ValueError(f"unknown method {method!r}")


def _diagonal(shape, spacing) -> float:
    sy, sx = _spacing(spacing)
    return math.hypot(shape[0] * sy, shape[1] * sx)


def assd(a, b, spacing=1.0, method: str = "edt") -> float:
    """Average symmetric surface distance.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    a, b = _pair(a, b)
    d = surface_distances(a, b, spacing, method)
    if d is None:
        return 0.0 if not (a.any() or b.any()) else _diagonal(a.shape, spacing)
    da, db = d
    return float((da.sum() + db.sum()) / (len(da) + len(db)))


def hausdorff(a, b, spacing=1.0, method: str = "edt") -> float:
    """Exact (100th percentile) symmetric Hausdorff distance; empty-mask rules as :func:`assd`."""
    a, b = _pair(a, b)
    d = surface_distances(a, b, spacing, method)
    if d is None:
        return 0.0 if not (a.any() or b.any()) else _diagonal(a.shape, spacing)
    da, db = d
    return float(max(da.max(), db.max()))


# arm evaluation ------------------------------------------------------------------

@dataclass
class StructureStats:
    structure: str
    dsc_mean: float
    dsc_std: float
    assd_mean: float
    assd_std: float
    hd_mean: float
    hd_std: float
    n_items: int
    n_excluded: int
    n_empty_mismatch: int = 0


@dataclass
class ArmReport:
    arm: str
    structures: list
    average: StructureStats
    per_item: dict = field(default_factory=dict, repr=False)

    def rows(self) -> list:
        return [*self.structures, self.average]

    def row(self, structure: str) -> StructureStats:
        for r in self.rows():
            if r.structure == structure:
                return r
        raise KeyError(structure)

    def mean_dsc(self, structures: Optional[Sequence[str]] = None) -> float:
        picked = [r for r in self.structures if structures is None or r.structure in structures]
        return float(np.mean([r.dsc_mean for r in picked]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows():
            w.writerow([self.arm, r.structure, *(f"{v:.6f}" for v in (
                r.dsc_mean, r.dsc_std, r.assd_mean, r.assd_std, r.hd_mean, r.hd_std)),
                r.n_items, r.n_excluded])
        return buf.getvalue()


def _mean_std(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def predict_labels(logits) -> np.ndarray:
    """Argmax over channels; ties go to the lowest channel index."""
    return np.argmax(np.asarray(logits), axis=-1)


def structure_names(scheme: LabelScheme) -> list:
    return list(scheme.names) if scheme.names else [f"label_{i}" for i in range(scheme.num_base_labels)]


def evaluate_predictions(pred, truth, scheme: LabelScheme, arm: str = "", spacing=1.0,
                         include_background: bool = False) -> ArmReport:
    """Score predicted label maps ``(N, H, W)`` against fully annotated ``truth``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    if (truth >= scheme.num_base_labels).any() or (truth < 0).any():
        raise SchemeError("test labels must be base ids only (merged labels found)")
    names = structure_names(scheme)
    ids = range(0 if include_background else 1, scheme.num_base_labels)
    stats, per_item = [], {}
    for k in ids:
        dsc, asd, hd = [], [], []
        excluded = mismatch = 0
        for p, t in zip(pred, truth):
            pm, tm = p == k, t == k
            dsc.append(dice(pm, tm))
            if not pm.any() and not tm.any():
                excluded += 1
                continue
            if pm.any() != tm.any():
                mismatch += 1
            asd.append(assd(pm, tm, spacing))
            hd.append(hausdorff(pm, tm, spacing))
        per_item[names[k]] = {"dsc": dsc, "assd": asd, "hd": hd}
        stats.append(StructureStats(names[k], *_mean_std(dsc), *_mean_std(asd), *_mean_std(hd),
                                    len(pred), excluded, mismatch))
    # average row: mean and spread of the per-structure means
    avg = StructureStats(
        "average",
        *_mean_std([s.dsc_mean for s in stats]),
        *_mean_std([s.assd_mean for s in stats if not math.isnan(s.assd_mean)]),
        *_mean_std([s.hd_mean for s in stats if not math.isnan(s.hd_mean)]),
        len(pred), sum(s.n_excluded for s in stats), sum(s.n_empty_mismatch for s in stats),
    )
    return ArmReport(arm, stats, avg, per_item)


def evaluate_arm(model, images, labels, scheme: LabelScheme, arm: str = "", spacing=1.0,
                 batch_size: int = 8) -> ArmReport:
    """Run ``model`` on test images and score its argmax against ``labels``.

    ``model`` is either a network accepted by :func:`hetseg.segmodel.forward` or a
    callable mapping an ``(B, H, W, Cin)`` image batch to ``(B, H, W, C)`` logits.
    """
    if isinstance(model, Callable) and not hasattr(model, "parameters"):
        logits_fn = model
    else:
        from .segmodel import forward

        def logits_fn(x):
            return forward(model, x)

    labels = np.asarray(labels)
    if (labels >= scheme.num_base_labels).any():
        raise SchemeError("test labels must be base ids only (merged labels found)")
    preds = [predict_labels(logits_fn(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return evaluate_predictions(np.concatenate(preds), labels, scheme, arm, spacing)
