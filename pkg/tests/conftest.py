import math

import numpy as np
import pytest
import torch

from hetseg.labelspace import LabelScheme, SuperLabel


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_scheme(rng, num_labels=None, singleton=False):
    C = int(num_labels or rng.integers(2, 7))
    if singleton:
        members = [int(rng.integers(0, C))]
    else:
        size = int(rng.integers(2, C + 1))
        members = sorted(rng.choice(C, size=size, replace=False).tolist())
    return LabelScheme(C, (SuperLabel(C, members),))


def random_labels(rng, scheme, shape, super_fraction=0.3):
    """Base ids everywhere, with roughly ``super_fraction`` pixels relabeled to the super id."""
    C = scheme.num_base_labels
    labels = rng.integers(0, C, size=shape)
    if scheme.super_labels and super_fraction > 0:
        labels = np.where(rng.random(shape) < super_fraction, scheme.super_labels[0].id, labels)
    return labels


def random_batch_arrays(rng, scheme=None, max_hw=8, max_b=2, low=-5.0, high=5.0, super_fraction=0.3):
    scheme = scheme or random_scheme(rng)
    B = int(rng.integers(1, max_b + 1))
    H = int(rng.integers(1, max_hw + 1))
    W = int(rng.integers(1, max_hw + 1))
    logits = rng.uniform(low, high, size=(B, H, W, scheme.num_base_labels))
    labels = random_labels(rng, scheme, (B, H, W), super_fraction)
    return logits, labels, scheme


def scalar_loss_oracle(kind, logits, labels, scheme):
    """Per-pixel loop with math.exp/math.log; normalised by the total pixel count."""
    C = scheme.num_base_labels
    z = np.asarray(logits, dtype=np.float64).reshape(-1, C)
    lab = np.asarray(labels).reshape(-1)
    members = {s.id: s.members for s in scheme.super_labels}
    total = 0.0
    for row, t in zip(z, lab):
        exps = [math.exp(v) for v in row]
        norm = sum(exps)
        q = [e / norm for e in exps]
        t = int(t)
        if t < C:
            total += -math.log(q[t])
        elif kind == "slac":
            total += -math.log(sum(q[k] for k in members[t]))
    return total / len(lab)
