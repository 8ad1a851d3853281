"""Pixelwise crossentropy losses for heterogeneously labeled data.

Three objectives are provided, all in the minimised (negative log) form and
all returning the exact gradient with respect to the logits:

``xent``
    Standard crossentropy; every pixel carries a base label.
``naive``
    Crossentropy where pixels carrying a super label contribute nothing.
``slac``
    Super-label-aware crossentropy: a super-label pixel contributes
    ``-log sum_{k in S} q_k``, the negative log of the probability mass the
    network assigns to the super label's member set ``S``.

All three share one code path, so on fully annotated maps they agree
bit-for-bit. The default reduction divides by the total pixel count
``B*H*W``; masked pixels stay in the denominator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labelspace import LabelScheme, SchemeError, check_labels, mask_from_labels
from .tensorcore import NonFiniteError, log_softmax, logsumexp

LOSS_KINDS = ("xent", "naive", "slac")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    pixels_counted: int


@dataclass
class Batch:
    """Logits ``(B, H, W, C)`` with per-pixel label ids under ``scheme``."""

    logits: np.ndarray
    labels: np.ndarray
    scheme: LabelScheme
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels)
        if logits.ndim == 3:
            logits = logits[None]
        if labels.ndim == 2:
            labels = labels[None]
        if logits.ndim != 4:
            raise ValueError(f"logits must be (B, H, W, C), got shape {logits.shape}")
        if logits.shape[:3] != labels.shape:
            raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape[:3]}")
        if logits.shape[-1] != self.scheme.num_base_labels:
            raise SchemeError(
                f"logits have {logits.shape[-1]} channels, scheme has {self.scheme.num_base_labels} labels"
            )
        labels = check_labels(labels, self.scheme)
        derived = mask_from_labels(labels, self.scheme)
        if self.mask is not None:
            mask = np.asarray(self.mask).reshape(derived.shape)
            if not np.array_equal(mask.astype(np.uint8), derived):
                raise SchemeError("mask is inconsistent with the label map")
        self.logits, self.labels, self.mask = logits, labels, derived

    @property
    def num_pixels(self) -> int:
        return int(np.prod(self.labels.shape))


def _evaluate(batch: Batch, kind: str, reduction: str = "mean") -> LossResult:
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    scheme = batch.scheme
    C = scheme.num_base_labels
    z = batch.logits.reshape(-1, C)
    labels = batch.labels.reshape(-1)
    valid = batch.mask.reshape(-1).astype(bool)

    if kind == "xent" and not valid.all():
        raise SchemeError("xent_loss requires base labels only; found super ids")

    logq = log_softmax(z)
    q = np.exp(logq)
    per_pixel = np.zeros(z.shape[0], dtype=np.float64)
    grad = np.zeros_like(z)

    vi = np.flatnonzero(valid)
    targets = labels[vi]
    per_pixel[vi] = -logq[vi, targets]
    grad[vi] = q[vi]
    grad[vi, targets] -= 1.0
    counted = vi.size

    si = np.flatnonzero(~valid)
    if kind == "slac" and si.size:
        members = scheme.member_table()[labels[si]]
        zs = z[si]
        lse_group = logsumexp(zs, where=members)
        lse_all = logsumexp(zs)
        full = members.all(axis=-1)
        per_pixel[si] = np.where(full, 0.0, lse_all - lse_group)
        # q_k restricted and renormalised to the member set
        q_in_group = np.where(members, np.exp(zs - lse_group[:, None]), 0.0)
        grad[si] = q[si] - q_in_group
        counted += si.size

    value = float(per_pixel.sum())
    if reduction == "mean":
        n = z.shape[0]
        value /= n
        grad /= n
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"{kind} loss produced non-finite values")
    return LossResult(value=value, grad=grad.reshape(batch.logits.shape), pixels_counted=int(counted))


def xent_loss(batch: Batch, reduction: str = "mean") -> LossResult:
    return _evaluate(batch, "xent", reduction)


def naive_loss(batch: Batch, reduction: str = "mean") -> LossResult:
    return _evaluate(batch, "naive", reduction)


def slac_loss(batch: Batch, reduction: str = "mean") -> LossResult:
    return _evaluate(batch, "slac", reduction)


def compute_loss(kind: str, batch: Batch, reduction: str = "mean") -> LossResult:
    return _evaluate(batch, kind, reduction)


def finite_diff_grad(kind: str, batch: Batch, h: float = 1e-5, reduction: str = "mean") -> np.ndarray:
    """Central-difference gradient of a loss with respect to every logit."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    base = batch.logits
    flat = base.reshape(-1)
    grad = np.empty_like(flat)
    probe = Batch(base.copy(), batch.labels, batch.scheme)
    pflat = probe.logits.reshape(-1)
    for i in range(flat.size):
        pflat[i] = flat[i] + h
        up = _evaluate(probe, kind, reduction).value
        pflat[i] = flat[i] - h
        down = _evaluate(probe, kind, reduction).value
        pflat[i] = flat[i]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite loss while probing logit {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(base.shape)
