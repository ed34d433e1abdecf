"""Pareto-smoothed importance-sampling leave-one-out cross-validation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from infocrit.criteria import PARETO_K_HIGH, PSIS_DEGRADED, PointwiseLogLik, _as_loglik
from infocrit.numerics import fit_gpd_tail, gpd_quantile, log_mean_exp

#: Pareto shape above which the importance-sampling estimate is unreliable.
KHAT_THRESHOLD = 0.7
#: Below this many draws the tail fit is not attempted.
MIN_DRAWS_FOR_SMOOTHING = 25


@dataclass(frozen=True)
class PsisResult:
    loo: float
    p_loo: float
    lppd_loo: float
    loo_j: np.ndarray
    khat: np.ndarray
    smoothed_logweights: np.ndarray
    tail_length: int
    flags: frozenset


def tail_length(n_draws: int) -> int:
    """Number of largest weights used for the tail fit: ``ceil(min(0.2 S, 3 sqrt(S)))``."""
    return int(math.ceil(min(0.2 * n_draws, 3.0 * math.sqrt(n_draws))))


def psis_smooth(log_weights: np.ndarray, m_tail: int) -> tuple[np.ndarray, float]:
    """Pareto-smooth one column of log-weights.

    Returns normalized smoothed log-weights and the fitted shape (``nan`` when
    no fit was possible, in which case the weights are truncated instead).
    """
    lw = np.array(log_weights, dtype=float)
    lw -= lw.max()
    s = lw.size
    if np.all(lw == 0.0):
        return lw - math.log(s), math.nan

    khat = math.nan
    order = np.argsort(lw, kind="stable")
    if s >= MIN_DRAWS_FOR_SMOOTHING and m_tail < s:
        cutoff = lw[order[s - m_tail - 1]]
        tail_idx = order[s - m_tail:]
        tail_idx = tail_idx[lw[tail_idx] > cutoff]
        exp_cut = math.exp(cutoff)
        excess = np.exp(lw[tail_idx]) - exp_cut
        fit = fit_gpd_tail(excess)
        if fit is not None:
            khat = fit.k_hat
            n = tail_idx.size
            probs = (np.arange(n) + 0.5) / n
            smoothed = np.log(gpd_quantile(probs, fit.k_hat, fit.sigma_hat) + exp_cut)
            lw[tail_idx] = smoothed
            # cap at the largest raw weight (0 after the shift)
            np.minimum(lw, 0.0, out=lw)
            return lw - logsumexp(lw), khat

    # truncated importance sampling: cap weights at sqrt(S) times their mean
    cap = logsumexp(lw) - math.log(s) + 0.5 * math.log(s)
    np.minimum(lw, cap, out=lw)
    return lw - logsumexp(lw), khat


def psis_loo(ll, lppd_j: np.ndarray | None = None) -> PsisResult:
    """PSIS-LOO over the clusters of a pointwise log-likelihood matrix.

    Raw importance ratios are ``1 / f(y_j | theta^s)``. Columns are processed
    independently in a fixed order, so results do not depend on how the work
    is partitioned.
    """
    ll: PointwiseLogLik = _as_loglik(ll)
    v = ll.values
    s, j = v.shape
    if lppd_j is None:
        lppd_j = log_mean_exp(v, axis=0)
    m_tail = tail_length(s)

    smoothed = np.empty_like(v)
    khat = np.full(j, np.nan)
    loo_j = np.empty(j)
    degraded = s < MIN_DRAWS_FOR_SMOOTHING
    for col in range(j):
        lj = v[:, col]
        if np.all(lj == lj[0]):
            smoothed[:, col] = -math.log(s)
            loo_j[col] = lppd_j[col]
            continue
        lw, k = psis_smooth(-lj, m_tail)
        smoothed[:, col] = lw
        khat[col] = k
        if not np.isfinite(k):
            degraded = True
        loo_j[col] = logsumexp(lw + lj)

    lppd_loo = float(np.sum(loo_j))
    lppd = float(np.sum(lppd_j))
    flags = set()
    if np.any(khat > KHAT_THRESHOLD):
        flags.add(PARETO_K_HIGH)
    if degraded:
        flags.add(PSIS_DEGRADED)
    return PsisResult(
        loo=-2.0 * lppd_loo,
        p_loo=lppd - lppd_loo,
        lppd_loo=lppd_loo,
        loo_j=loo_j,
        khat=khat,
        smoothed_logweights=smoothed,
        tail_length=m_tail,
        flags=frozenset(flags),
    )
