"""Numerically stable softmax / log-sum-exp over the trailing channel axis.

Everything here works in float64 on arrays shaped ``(..., C)``.
"""
import numpy as np


class NonFiniteError(FloatingPointError):
    pass


def _as_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim < 1 or z.shape[-1] < 1:
        raise ValueError("logits need a trailing channel axis")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("logits contain non-finite values")
    return z


def logsumexp(logits, where=None) -> np.ndarray:
    """``log sum exp`` over the last axis, optionally restricted to ``where``.

    Rows where ``where`` selects nothing give ``-inf``.
    """
    z = _as_logits(logits)
    if where is None:
        m = z.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
    where = np.broadcast_to(np.asarray(where, dtype=bool), z.shape)
    zm = np.where(where, z, -np.inf)
    m = zm.max(axis=-1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.where(where, np.exp(zm - m_safe), 0.0).sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return (m_safe + np.log(s))[..., 0]


def log_softmax(logits) -> np.ndarray:
    z = _as_logits(logits)
    return z - logsumexp(z)[..., None]


def softmax_channels(logits) -> np.ndarray:
    """Softmax over the last axis with max-shift; every output is strictly positive."""
    z = _as_logits(logits)
    if z.shape[-1] < 2:
        raise ValueError("softmax needs at least two channels")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_group_prob(logits, group) -> float:
    """``log sum_{k in group} softmax(logits)_k`` for a single pixel's logit vector.

    Computed as a difference of two log-sum-exps so no small probability is
    ever formed explicitly.
    """
    z = _as_logits(logits)
    if z.ndim != 1:
        raise ValueError("log_group_prob takes a single logit vector")
    idx = sorted({int(k) for k in group})
    if not idx:
        raise ValueError("group must be non-empty")
    if idx[0] < 0 or idx[-1] >= z.shape[0]:
        raise IndexError(f"group {idx} out of range for {z.shape[0]} channels")
    if len(idx) == z.shape[0]:
        return 0.0
    sel = np.zeros(z.shape[0], dtype=bool)
    sel[idx] = True
    return float(logsumexp(z, where=sel) - logsumexp(z))


def log_group_prob_map(logits, members) -> np.ndarray:
    """Vectorised :func:`log_group_prob` with a per-pixel boolean channel selection.

    ``members`` broadcasts against ``logits``; rows selecting every channel
    return exactly 0.
    """
    z = _as_logits(logits)
    members = np.broadcast_to(np.asarray(members, dtype=bool), z.shape)
    out = logsumexp(z, where=members) - logsumexp(z)
    return np.where(members.all(axis=-1), 0.0, out)
