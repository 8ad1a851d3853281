import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetseg.labelspace import LabelScheme, SchemeError, SuperLabel, merge_labels, relabel_permute
from hetseg.losses import Batch, compute_loss, finite_diff_grad, naive_loss, slac_loss, xent_loss

from conftest import random_batch_arrays, random_scheme, scalar_loss_oracle

PLAIN3 = LabelScheme(3, (SuperLabel(3, {0, 1}),))


def one_pixel(logits, label, scheme=PLAIN3):
    return Batch(np.asarray(logits, dtype=np.float64).reshape(1, 1, 1, -1), np.array([[[label]]]), scheme)


# xent ----------------------------------------------------------------------------

def test_xent_perfect_prediction():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    logits = np.where(np.eye(3)[labels] > 0, 40.0, 0.0)
    assert xent_loss(Batch(logits, labels, PLAIN3)).value < 1e-12


def test_xent_uniform_is_log_c():
    assert xent_loss(one_pixel([0, 0, 0], 1)).value == pytest.approx(1.0986122886681098, abs=1e-12)


def test_xent_123_target0():
    # -ln softmax(1,2,3)_0, mpmath
    assert xent_loss(one_pixel([1, 2, 3], 0)).value == pytest.approx(2.4076059644443803, abs=1e-12)


def test_xent_rejects_super_ids():
    with pytest.raises(SchemeError):
        xent_loss(one_pixel([0, 0, 0], 3))


def test_xent_gradient_formula():
    b = one_pixel([1, 2, 3], 2)
    q = np.exp([1, 2, 3]) / np.exp([1, 2, 3]).sum()
    np.testing.assert_allclose(xent_loss(b).grad.ravel(), q - [0, 0, 1], atol=1e-15)


# naive ---------------------------------------------------------------------------

def test_naive_all_masked_is_zero():
    rng = np.random.default_rng(2)
    b = Batch(rng.normal(size=(1, 3, 3, 3)), np.full((1, 3, 3), 3), PLAIN3)
    res = naive_loss(b)
    assert res.value == 0.0 and not res.grad.any() and res.pixels_counted == 0


def test_naive_unmasked_equals_xent_bitwise():
    rng = np.random.default_rng(3)
    b = Batch(rng.normal(size=(2, 3, 3, 3)), rng.integers(0, 3, size=(2, 3, 3)), PLAIN3)
    a, x = naive_loss(b), xent_loss(b)
    assert a.value == x.value and np.array_equal(a.grad, x.grad)


def test_naive_two_pixels_one_masked():
    logits = np.array([[[[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]]]])
    labels = np.array([[[1, 3]]])
    expected = scalar_loss_oracle("naive", logits, labels, PLAIN3)
    # by hand: -log softmax(0.5,-1,2)_1 / 2
    by_hand = -(-1.0 - math.log(math.exp(0.5) + math.exp(-1.0) + math.exp(2.0))) / 2
    assert expected == pytest.approx(by_hand, abs=1e-15)
    assert naive_loss(Batch(logits, labels, PLAIN3)).value == pytest.approx(by_hand, abs=1e-14)


# slac ----------------------------------------------------------------------------

def test_slac_unmasked_equals_xent_bitwise():
    rng = np.random.default_rng(4)
    b = Batch(rng.normal(size=(2, 3, 3, 3)), rng.integers(0, 3, size=(2, 3, 3)), PLAIN3)
    a, x = slac_loss(b), xent_loss(b)
    assert a.value == x.value and np.array_equal(a.grad, x.grad)


def test_slac_single_super_pixel_value():
    res = slac_loss(one_pixel(np.log([0.2, 0.3, 0.5]), 3))
    assert res.value == pytest.approx(0.6931471805599453, abs=1e-12)


def test_slac_full_super_set_is_exactly_zero():
    scheme = LabelScheme(4, (SuperLabel(4, {0, 1, 2, 3}),))
    rng = np.random.default_rng(5)
    res = slac_loss(Batch(rng.uniform(-5, 5, size=(2, 3, 3, 4)), np.full((2, 3, 3), 4), scheme))
    assert res.value == 0.0


def test_slac_uniform_gradient_direction():
    scheme = LabelScheme(4, (SuperLabel(4, {0, 1}),))
    b = Batch(np.zeros((1, 1, 1, 4)), np.array([[[4]]]), scheme)
    fd = finite_diff_grad("slac", b, h=1e-5).ravel()
    np.testing.assert_allclose(fd, [-0.25, -0.25, 0.25, 0.25], atol=1e-9)
    np.testing.assert_allclose(slac_loss(b).grad.ravel(), [-0.25, -0.25, 0.25, 0.25], atol=1e-15)


def test_slac_unknown_super_id():
    with pytest.raises(SchemeError):
        slac_loss(one_pixel([0, 0, 0], 7))


def test_batch_checks():
    with pytest.raises(SchemeError):
        Batch(np.zeros((1, 2, 2, 4)), np.zeros((1, 2, 2), int), PLAIN3)
    with pytest.raises(ValueError):
        Batch(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 3), int), PLAIN3)
    with pytest.raises(SchemeError):
        Batch(np.zeros((1, 1, 2, 3)), np.array([[[0, 3]]]), PLAIN3, mask=np.ones((1, 1, 2)))


# finite differences -----------------------------------------------------------------

def test_fd_step_bounds():
    with pytest.raises(ValueError):
        finite_diff_grad("xent", one_pixel([0, 0, 0], 1), h=1e-2)


def test_fd_shift_direction_is_zero():
    rng = np.random.default_rng(6)
    logits, labels, scheme = random_batch_arrays(rng)
    b = Batch(logits, labels, scheme)
    h = 1e-5
    for kind in ("xent", "naive", "slac"):
        if kind == "xent":
            b = Batch(logits, np.minimum(labels, scheme.num_base_labels - 1), scheme)
        up = b.logits.copy()
        up[0, 0, 0, :] += h
        down = b.logits.copy()
        down[0, 0, 0, :] -= h
        d = (compute_loss(kind, Batch(up, b.labels, scheme)).value
             - compute_loss(kind, Batch(down, b.labels, scheme)).value) / (2 * h)
        assert abs(d) < 1e-6


def test_fd_at_perfect_prediction_is_zero():
    labels = np.array([[[0, 1], [2, 1]]])
    logits = np.where(np.eye(3)[labels] > 0, 40.0, 0.0)
    fd = finite_diff_grad("xent", Batch(logits, labels, PLAIN3), h=1e-5)
    assert np.abs(fd).max() < 1e-9


# properties ----------------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_values_match_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    logits, labels, scheme = random_batch_arrays(rng)
    b = Batch(logits, labels, scheme)
    for kind in ("naive", "slac"):
        assert compute_loss(kind, b).value == pytest.approx(
            scalar_loss_oracle(kind, logits, labels, scheme), rel=1e-12, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits, labels, scheme = random_batch_arrays(rng, max_hw=4)
    for kind in ("xent", "naive", "slac"):
        lab = np.minimum(labels, scheme.num_base_labels - 1) if kind == "xent" else labels
        b = Batch(logits, lab, scheme)
        g = compute_loss(kind, b).grad
        fd = finite_diff_grad(kind, b, h=1e-5)
        assert (np.abs(g - fd) / np.maximum(1.0, np.abs(g))).max() < 1e-4


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_gradient_channel_sums_vanish(seed):
    rng = np.random.default_rng(seed)
    logits, labels, scheme = random_batch_arrays(rng)
    for kind in ("naive", "slac"):
        res = compute_loss(kind, Batch(logits, labels, scheme))
        assert np.abs(res.grad.sum(axis=-1)).max() <= 1e-10
        assert res.value >= 0 and res.pixels_counted <= labels.size


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_singleton_super_equals_crossentropy(seed):
    rng = np.random.default_rng(seed)
    scheme = random_scheme(rng, singleton=True)
    C = scheme.num_base_labels
    (k,) = scheme.super_labels[0].members
    logits = rng.uniform(-5, 5, size=(1, 3, 3, C))
    as_super = slac_loss(Batch(logits, np.full((1, 3, 3), C), scheme))
    as_base = xent_loss(Batch(logits, np.full((1, 3, 3), k), scheme))
    assert abs(as_super.value - as_base.value) <= 1e-12
    np.testing.assert_allclose(as_super.grad, as_base.grad, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_group_term_bounded_by_member_term(seed):
    rng = np.random.default_rng(seed)
    scheme = random_scheme(rng)
    C = scheme.num_base_labels
    sup = scheme.super_labels[0]
    z = rng.uniform(-5, 5, size=(1, 1, 1, C))
    group = slac_loss(Batch(z, np.array([[[sup.id]]]), scheme)).value
    for k in sup.members:
        assert group <= xent_loss(Batch(z, np.array([[[k]]]), scheme)).value + 1e-15


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    logits, labels, scheme = random_batch_arrays(rng)
    C = scheme.num_base_labels
    perm = np.concatenate([[0], 1 + rng.permutation(C - 1)])
    s2, l2 = relabel_permute(scheme, labels, perm)
    z2 = np.empty_like(logits)
    z2[..., perm] = logits  # channel k moves to perm[k]
    for kind in ("naive", "slac"):
        a = compute_loss(kind, Batch(logits, labels, scheme)).value
        b = compute_loss(kind, Batch(z2, l2, s2)).value
        assert abs(a - b) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_naive_sum_bounded_by_premerge_xent(seed):
    rng = np.random.default_rng(seed)
    scheme = random_scheme(rng)
    C = scheme.num_base_labels
    base = rng.integers(0, C, size=(1, 5, 5))
    merged = merge_labels(base, scheme, C)
    z = rng.uniform(-5, 5, size=(1, 5, 5, C))
    naive = naive_loss(Batch(z, merged, scheme), reduction="sum").value
    full = xent_loss(Batch(z, base, scheme), reduction="sum").value
    assert naive <= full
