import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hetseg.tensorcore import (
    NonFiniteError, log_group_prob, log_group_prob_map, log_softmax, logsumexp, softmax_channels,
)

# mpmath at 30 digits
SOFTMAX_123 = (0.0900305731703804580, 0.244728471054797652, 0.665240955774821890)


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_channels([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_large_logit_no_overflow():
    q = softmax_channels([1000.0, 0.0])
    assert np.all(np.isfinite(q))
    # exp(-1000) is below the float64 range, so the small entry underflows to 0
    assert q[0] == 1.0 and 0.0 <= q[1] < 1e-300


def test_softmax_123():
    np.testing.assert_allclose(softmax_channels([1.0, 2.0, 3.0]), SOFTMAX_123, atol=1e-5)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        softmax_channels([np.nan, 0.0])
    with pytest.raises(NonFiniteError):
        softmax_channels([np.inf, 0.0])


def test_log_group_prob_all_channels_is_zero():
    assert log_group_prob([0.3, -2.0, 5.0], [0, 1, 2]) == 0.0


def test_log_group_prob_uniform_half():
    assert log_group_prob([0.0] * 4, [0, 1]) == pytest.approx(-0.6931471805599453, abs=1e-12)


def test_log_group_prob_singleton_is_log_softmax():
    z = np.array([1.0, -3.0, 0.5])
    for k in range(3):
        assert log_group_prob(z, [k]) == pytest.approx(log_softmax(z)[k], abs=1e-14)


def test_log_group_prob_empty_group():
    with pytest.raises(ValueError):
        log_group_prob([0.0, 1.0], [])


def test_log_group_prob_far_tail_stays_finite():
    # softmax of the group underflows to 0 in float64; the log-space route does not
    v = log_group_prob([800.0, 0.0, 0.0], [1, 2])
    assert v == pytest.approx(-800.0 + math.log(2), abs=1e-9)


def test_log_group_prob_map_matches_scalar():
    rng = np.random.default_rng(0)
    z = rng.uniform(-5, 5, size=(20, 5))
    members = rng.random((20, 5)) < 0.5
    members[:, 0] = True
    members[3] = True
    out = log_group_prob_map(z, members)
    for i in range(20):
        assert out[i] == pytest.approx(log_group_prob(z[i], np.flatnonzero(members[i])), abs=1e-13)
    assert out[3] == 0.0


logit_vectors = arrays(np.float64, st.integers(2, 8), elements=st.floats(-30, 30))


@settings(max_examples=200, deadline=None)
@given(logit_vectors, st.floats(-50, 50))
def test_softmax_shift_invariance(z, c):
    a, b = softmax_channels(z), softmax_channels(z + c)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


@settings(max_examples=200, deadline=None)
@given(logit_vectors)
def test_softmax_sums_to_one_and_positive(z):
    q = softmax_channels(z)
    assert abs(q.sum() - 1.0) <= 1e-12
    assert np.all(q > 0)


@settings(max_examples=200, deadline=None)
@given(logit_vectors, st.data())
def test_log_group_prob_matches_direct_and_is_monotone(z, data):
    C = len(z)
    group = sorted(data.draw(st.sets(st.integers(0, C - 1), min_size=1)))
    v = log_group_prob(z, group)
    direct = math.log(sum(softmax_channels(z)[group]))
    assert v <= 0.0
    assert abs(v - direct) <= 1e-10
    bigger = sorted(set(group) | {data.draw(st.integers(0, C - 1))})
    assert log_group_prob(z, bigger) >= v - 1e-15


def test_logsumexp_where_empty_row_is_neg_inf():
    out = logsumexp(np.zeros((2, 3)), where=np.array([[False] * 3, [True] * 3]))
    assert out[0] == -np.inf and out[1] == pytest.approx(math.log(3))
