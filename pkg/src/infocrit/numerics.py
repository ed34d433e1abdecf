"""Shared numerical kernels.

Stable log-sum-exp, Cholesky-backed multivariate normal log-density,
generalized Pareto tail fitting and one-pass moments. Everything here is a pure
function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.linalg import solve_triangular

from infocrit.errors import NotPositiveDefiniteError, NumericInputError, UsageError

LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "GpdFit",
    "SpdMatrix",
    "fit_gpd_tail",
    "gpd_quantile",
    "log_mean_exp",
    "log_sum_exp",
    "mvn_logpdf",
    "running_moments",
]


def log_sum_exp(values) -> float:
    """Return ``log(sum(exp(values)))`` without overflow.

    ``-inf`` entries are legal (they contribute nothing); NaN is rejected.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise UsageError("log_sum_exp needs at least one value")
    if np.isnan(v).any():
        raise NumericInputError("log_sum_exp input contains NaN")
    m = v.max()
    if not np.isfinite(m):
        # all -inf, or a +inf present
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_mean_exp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Vectorized ``log(mean(exp(a)))`` along ``axis``; inputs assumed finite."""
    a = np.asarray(a, dtype=float)
    m = a.max(axis=axis, keepdims=True)
    out = np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


class SpdMatrix:
    """Symmetric positive-definite matrix with its lower Cholesky factor.

    Construction fails with :class:`NotPositiveDefiniteError` when the matrix is
    not symmetric (1e-12 relative) or the factorization hits a non-positive pivot.
    """

    __slots__ = ("entries", "chol", "dim")

    def __init__(self, entries):
        a = np.array(entries, dtype=float, ndmin=2)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise UsageError(f"covariance must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NumericInputError("covariance contains non-finite entries")
        scale = max(np.abs(a).max(), np.finfo(float).tiny)
        if np.abs(a - a.T).max() > 1e-12 * scale:
            raise NotPositiveDefiniteError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(str(exc)) from None
        if not np.all(np.diag(chol) > 0):
            raise NotPositiveDefiniteError("non-positive Cholesky pivot")
        self.entries = a
        self.chol = chol
        self.dim = a.shape[0]

    @property
    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))

    def whiten(self, r: np.ndarray) -> np.ndarray:
        """Solve ``L z = r`` for column(s) ``r``."""
        return solve_triangular(self.chol, r, lower=True, check_finite=False)


def mvn_logpdf(x, mean, cov) -> float | np.ndarray:
    """Multivariate normal log-density via one Cholesky factorization.

    ``x`` may be a single vector of length n or an (m, n) array of rows, in which
    case a length-m array is returned. ``cov`` is an :class:`SpdMatrix` or
    anything convertible to one.
    """
    if not isinstance(cov, SpdMatrix):
        cov = SpdMatrix(cov)
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    n = cov.dim
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    if rows.shape[-1] != n or mean.shape[-1] != n:
        raise UsageError(
            f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov {cov.entries.shape}"
        )
    z = cov.whiten((rows - mean).T)
    quad = np.sum(z * z, axis=0)
    out = -0.5 * (n * LOG_2PI + cov.logdet + quad)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class GpdFit:
    k_hat: float
    sigma_hat: float
    n_tail: int


def fit_gpd_tail(sorted_tail) -> GpdFit | None:
    """Fit a generalized Pareto distribution to threshold excesses.

    Uses the Zhang & Stephens (2009) estimator: the profile likelihood in
    ``b = -k/sigma`` is evaluated on a grid, the grid is weighted by that
    likelihood, and the weighted mean of ``b`` gives the shape and scale.
    The shape is lightly shrunk toward 0.5 (10 pseudo-observations), the
    usual choice for importance-sampling tails.

    Returns ``None`` when fewer than 5 excesses are supplied; callers then fall
    back to unsmoothed weights.
    """
    x = np.asarray(sorted_tail, dtype=float)
    n = x.size
    if n < 5:
        return None
    if np.any(np.diff(x) < 0):
        raise UsageError("fit_gpd_tail expects input sorted ascending")
    if x[-1] <= 0:
        return None

    prior_bs = 3.0
    prior_k = 10.0
    m = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1, dtype=float) - 0.5))
    quartile = x[int(n / 4 + 0.5) - 1]
    if quartile <= 0:
        quartile = x[x > 0][0]
    b = b / (prior_bs * quartile) + 1.0 / x[-1]

    k = np.log1p(-b[:, None] * x).mean(axis=1)
    profile = n * (np.log(-b / k) - k - 1.0)
    with np.errstate(over="ignore"):
        w = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    keep = w >= 10 * np.finfo(float).eps
    w, b = w[keep], b[keep]
    w /= w.sum()

    b_post = float(np.sum(b * w))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    if not (np.isfinite(k_post) and sigma > 0):
        return None
    return GpdFit(k_hat=k_post, sigma_hat=float(sigma), n_tail=n)


def gpd_quantile(p, k: float, sigma: float) -> np.ndarray:
    """Quantile function of the GPD with location 0."""
    p = np.asarray(p, dtype=float)
    if abs(k) < np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def running_moments(stream: Iterable[float]) -> tuple[float, float]:
    """One-pass (Welford) mean and unbiased variance of a stream.

    Values are shifted by the first one before accumulating, which keeps a
    large common offset from eating the precision of the spread.
    Raises :class:`UsageError` if the stream holds fewer than two values.
    """
    n = 0
    shift = 0.0
    mean = 0.0
    m2 = 0.0
    for value in stream:
        value = float(value)
        if math.isnan(value):
            raise NumericInputError("stream contains NaN")
        if n == 0:
            shift = value
        value -= shift
        n += 1
        delta = value - mean
        mean += delta / n
        m2 += delta * (value - mean)
    if n < 2:
        raise UsageError("variance needs at least 2 values")
    return shift + mean, m2 / (n - 1)
