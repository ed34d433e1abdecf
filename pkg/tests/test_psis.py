import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logsumexp

from infocrit.criteria import PARETO_K_HIGH, PSIS_DEGRADED, waic
from infocrit.psis import psis_loo, psis_smooth, tail_length
from infocrit.simulate import make_rng


def naive_is_loo(v):
    """Plain importance-sampling LOO: harmonic mean of the likelihoods."""
    return float(np.sum(-(logsumexp(-v, axis=0) - math.log(v.shape[0]))))


def test_tail_length():
    assert tail_length(100) == 20
    assert tail_length(4000) == math.ceil(3 * math.sqrt(4000))


def test_constant_matrix():
    v = np.full((40, 3), -1.7)
    res = psis_loo(v)
    assert res.p_loo == 0.0
    assert res.loo == pytest.approx(-2 * waic(v).lppd, rel=1e-15)
    assert np.all(np.isnan(res.khat))


def test_matches_naive_is_for_light_tails():
    checked = 0
    for seed in range(20):
        v = -2.0 + 1e-4 * make_rng(seed).standard_normal((50, 3))
        res = psis_loo(v)
        if np.all(res.khat < 0.5):
            checked += 1
            assert -0.5 * res.loo == pytest.approx(naive_is_loo(v), abs=1e-6)
    assert checked >= 5


def test_weights_normalized_and_finite():
    v = make_rng(22).normal(-3, 1.0, (200, 5))
    res = psis_loo(v)
    assert np.all(np.isfinite(res.smoothed_logweights))
    np.testing.assert_allclose(np.exp(res.smoothed_logweights).sum(0), 1.0, atol=1e-10)
    assert res.p_loo == pytest.approx(waic(v).lppd - res.lppd_loo, abs=1e-9)


def test_smoothing_respects_truncation():
    lw = make_rng(23).standard_t(2, 500)
    smoothed, k = psis_smooth(lw, tail_length(500))
    raw = lw - lw.max()
    raw = raw - logsumexp(raw)
    assert np.isfinite(k)
    # no smoothed weight exceeds the largest raw weight (before renormalization)
    assert np.argmax(smoothed) in np.flatnonzero(smoothed == smoothed.max())
    assert smoothed.max() - logsumexp(smoothed) <= 0.0


def test_small_s_degrades():
    res = psis_loo(make_rng(24).normal(-2, 0.5, (10, 2)))
    assert PSIS_DEGRADED in res.flags
    assert np.all(np.isnan(res.khat))


def test_heavy_tail_flagged():
    rng = make_rng(25)
    # one cluster with a few draws of extremely poor fit
    v = np.full((400, 2), -1.0) + 0.01 * rng.standard_normal((400, 2))
    v[:, 1] = -np.abs(rng.standard_cauchy(400)) * 5
    res = psis_loo(v)
    assert res.khat[1] > 0.7
    assert PARETO_K_HIGH in res.flags


@given(
    arrays(np.float64, (30, 4), elements=st.floats(-10, 0, allow_nan=False)),
    st.permutations(range(4)),
)
def test_column_permutation(v, perm):
    a = psis_loo(v)
    b = psis_loo(v[:, list(perm)])
    assert b.loo == pytest.approx(a.loo, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(b.khat, a.khat[list(perm)], equal_nan=True)
