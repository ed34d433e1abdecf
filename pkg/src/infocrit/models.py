"""Marginal-likelihood models: one-factor analysis and growth mixture models.

Each model exposes a flat unconstrained parameter vector (what the sampler
moves in), a flat constrained vector (natural scale, used for posterior means
and the plug-in deviance), transforms between them, a log-prior on the
unconstrained scale, and pointwise marginal log-likelihoods.

Batched kernels (``*_batch``) take a leading axis of parameter points and are
what the sampler and the draw-wise log-likelihood matrix use. The single-point
``pointwise_loglik`` methods go through :func:`infocrit.numerics.mvn_logpdf`
and serve as the reference path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln, logsumexp

from infocrit.errors import UsageError
from infocrit.numerics import LOG_2PI, SpdMatrix, mvn_logpdf

SIGMA_FLOOR = 0.10
_CHUNK_ELEMENTS = 2_000_000


def normal_logpdf(x, mean=0.0, sd=1.0):
    z = (np.asarray(x) - mean) / sd
    return -0.5 * (LOG_2PI + z * z) - math.log(sd)


def half_normal_logpdf(x, sd):
    return math.log(2.0) + normal_logpdf(x, 0.0, sd)


def lkj_corr2_logpdf(rho, eta: float = 2.0):
    """LKJ(eta) density of the correlation of a 2x2 correlation matrix.

    For dimension 2 the correlation is ``2 * Beta(eta, eta) - 1``.
    """
    rho = np.asarray(rho, dtype=float)
    log_norm = -(2 * eta - 1) * math.log(2.0) - (2 * gammaln(eta) - gammaln(2 * eta))
    return (eta - 1.0) * np.log1p(-rho * rho) + log_norm


def dirichlet_logpdf(weights, alpha):
    """Symmetric-or-not Dirichlet log-density; weights on the last axis."""
    w = np.asarray(weights, dtype=float)
    a = np.broadcast_to(np.asarray(alpha, dtype=float), w.shape[-1:])
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    norm = gammaln(a.sum()) - gammaln(a).sum()
    return norm + np.sum((a - 1.0) * logw, axis=-1)


@dataclass(frozen=True)
class Dataset:
    """Clustered responses plus provenance metadata.

    For factor analysis ``y`` is a (J, n) array. For growth mixture models ``y``
    is a tuple of per-cluster response vectors and ``times`` the matching
    measurement times.
    """

    design: str
    y: object
    times: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.design == "fa":
            y = np.array(self.y, dtype=float)
            if y.ndim != 2:
                raise UsageError("factor-analysis data must be a (J, n) matrix")
            if not np.all(np.isfinite(y)):
                raise UsageError("responses must be finite")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)
        elif self.design == "gmm":
            ys = tuple(np.asarray(v, dtype=float) for v in self.y)
            ts = tuple(np.asarray(t, dtype=float) for t in self.times)
            if len(ys) != len(ts):
                raise UsageError("need one time vector per cluster")
            for v, t in zip(ys, ts):
                if v.shape != t.shape or v.size < 2:
                    raise UsageError("each cluster needs >= 2 occasions with matching times")
                if not np.all(np.isfinite(v)):
                    raise UsageError("responses must be finite")
            object.__setattr__(self, "y", ys)
            object.__setattr__(self, "times", ts)
            object.__setattr__(self, "_groups", _group_by_times(ys, ts))
        else:
            raise UsageError(f"unknown design {self.design!r}")

    @property
    def n_clusters(self) -> int:
        return len(self.y)

    def time_groups(self):
        """Clusters sharing a time vector, as ``(times, cluster_index, Y)`` triples."""
        return self._groups


def _group_by_times(ys, ts):
    buckets: dict[tuple, list[int]] = {}
    for j, t in enumerate(ts):
        buckets.setdefault(tuple(t.tolist()), []).append(j)
    groups = []
    for key, idx in buckets.items():
        idx = np.asarray(idx)
        groups.append((np.asarray(key), idx, np.stack([ys[j] for j in idx])))
    return tuple(groups)


def _batched_chol(v):
    return np.linalg.cholesky(v)


def _chunks(n_points: int, per_point: int):
    step = max(1, _CHUNK_ELEMENTS // max(per_point, 1))
    for start in range(0, n_points, step):
        yield slice(start, min(start + step, n_points))


class FactorModel:
    """One-factor model with marginal covariance ``lambda lambda' + diag(sigma^2)``.

    Unconstrained layout: ``[mu (n), lambda (n), tau (n)]`` with
    ``sigma = 0.10 + exp(tau)``. Constrained layout: ``[mu, lambda, sigma]``.
    """

    design = "fa"

    def __init__(self, n: int = 6, tau_prior_mean: float = math.log(0.6), tau_prior_sd: float = 0.25):
        if n < 1:
            raise UsageError("need at least one indicator")
        self.n = int(n)
        self.tau_prior_mean = tau_prior_mean
        self.tau_prior_sd = tau_prior_sd
        self._stats_cache: dict[int, tuple] = {}

    @property
    def q(self) -> int:
        return 3 * self.n

    @property
    def n_constrained(self) -> int:
        return 3 * self.n

    @property
    def param_names(self) -> list[str]:
        idx = range(1, self.n + 1)
        return [f"mu.{i}" for i in idx] + [f"lambda.{i}" for i in idx] + [f"sigma.{i}" for i in idx]

    @property
    def loading_slice(self) -> slice:
        return slice(self.n, 2 * self.n)

    def constrain(self, u):
        u = np.asarray(u, dtype=float)
        c = u.copy()
        c[..., 2 * self.n:] = SIGMA_FLOOR + np.exp(u[..., 2 * self.n:])
        return c

    def unconstrain(self, c):
        c = np.asarray(c, dtype=float)
        u = c.copy()
        u[..., 2 * self.n:] = np.log(c[..., 2 * self.n:] - SIGMA_FLOOR)
        return u

    def unpack(self, c):
        c = np.asarray(c, dtype=float)
        n = self.n
        return c[..., :n], c[..., n:2 * n], c[..., 2 * n:]

    def log_prior(self, u):
        """Normal(0,1) on intercepts and loadings, Normal(log 0.6, 0.25^2) on tau."""
        u = np.asarray(u, dtype=float)
        n = self.n
        lp = normal_logpdf(u[..., :2 * n]).sum(axis=-1)
        lp = lp + normal_logpdf(u[..., 2 * n:], self.tau_prior_mean, self.tau_prior_sd).sum(axis=-1)
        return lp

    def covariance(self, c) -> np.ndarray:
        _, lam, sigma = self.unpack(c)
        v = lam[..., :, None] * lam[..., None, :]
        idx = np.arange(self.n)
        v[..., idx, idx] += sigma**2
        return v

    def _check(self, data: Dataset):
        if data.design != "fa" or data.y.shape[1] != self.n:
            raise UsageError(f"data do not match a {self.n}-indicator factor model")

    def pointwise_loglik(self, c, data: Dataset) -> np.ndarray:
        """Length-J vector of marginal log-likelihoods at one constrained point."""
        self._check(data)
        c = np.asarray(c, dtype=float)
        if c.shape != (self.n_constrained,):
            raise UsageError(f"expected {self.n_constrained} constrained parameters")
        mu, _, _ = self.unpack(c)
        return mvn_logpdf(data.y, mu, SpdMatrix(self.covariance(c)))

    def pointwise_loglik_batch(self, c, data: Dataset) -> np.ndarray:
        """(B, J) log-likelihoods for a (B, 3n) batch of constrained points."""
        self._check(data)
        c = np.atleast_2d(np.asarray(c, dtype=float))
        out = np.empty((c.shape[0], data.n_clusters))
        y = data.y
        n = self.n
        for sl in _chunks(c.shape[0], data.n_clusters * n):
            cb = c[sl]
            chol = _batched_chol(self.covariance(cb))
            logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
            resid = y[None, :, :] - cb[:, None, :n]
            z = np.linalg.solve(chol, np.swapaxes(resid, -1, -2))
            quad = np.einsum("bnj,bnj->bj", z, z)
            out[sl] = -0.5 * (n * LOG_2PI + logdet[:, None] + quad)
        return out

    def _sufficient_stats(self, data: Dataset):
        hit = self._stats_cache.get(id(data))
        if hit is not None and hit[0] is data:
            return hit[1]
        y = data.y
        ybar = y.mean(axis=0)
        s = np.cov(y, rowvar=False, bias=True).reshape(self.n, self.n)
        stats = (y.shape[0], ybar, s, np.diag(s).copy())
        self._stats_cache = {id(data): (data, stats)}
        return stats

    def loglik_total_batch(self, u, data: Dataset) -> np.ndarray:
        """Total log-likelihood for a (B, q) batch of unconstrained points.

        Works from the sample mean and covariance, so the cost does not grow
        with J. ``V`` is diagonal plus rank one, so its log-determinant and
        inverse come from the determinant lemma and Sherman-Morrison.
        """
        self._check(data)
        u = np.atleast_2d(u)
        n_obs, ybar, s, s_diag = self._sufficient_stats(data)
        n = self.n
        mu, lam = u[:, :n], u[:, n:2 * n]
        var = (SIGMA_FLOOR + np.exp(u[:, 2 * n:])) ** 2
        w = lam / var
        one_plus = 1.0 + np.sum(w * lam, axis=1)
        d = ybar - mu
        wd = np.sum(w * d, axis=1)
        wsw = np.einsum("bi,ij,bj->b", w, s, w)
        trace = np.sum((s_diag + d * d) / var, axis=1) - (wsw + wd * wd) / one_plus
        logdet = np.sum(np.log(var), axis=1) + np.log(one_plus)
        return -0.5 * n_obs * (n * LOG_2PI + logdet + trace)

    def log_density_batch(self, u, data: Dataset):
        """Return ``(log posterior, log likelihood)`` for a batch of unconstrained points."""
        ll = self.loglik_total_batch(u, data)
        return ll + self.log_prior(u), ll

    def plugin_deviance(self, c, data: Dataset) -> float:
        return plugin_deviance(self, c, data)

    def to_config(self) -> dict:
        return {"design": "fa", "n": self.n}


class GmmModel:
    """K-class growth mixture model, marginal over the random intercept and slope.

    Unconstrained layout (q = 7K): intercepts (K; an ordered transform when
    ``ordered_intercepts``), linear slopes (K), quadratic slopes (K), log sd of
    the random intercept (K), log sd of the random slope (K), atanh of their
    correlation (K), log residual sd (1), stick-breaking weights (K - 1).

    Constrained layout (7K + 1): ``beta0, beta1, beta2, sd1, sd2, rho`` (K each),
    ``sigma_e``, then the K mixing weights.
    """

    design = "gmm"

    def __init__(
        self,
        k: int,
        beta_prior_sd: float = 10.0,
        sd_prior_scale: float = 10.0,
        lkj_eta: float = 2.0,
        dirichlet_alpha: float = 10.0,
        ordered_intercepts: bool = True,
    ):
        if k < 1:
            raise UsageError("need at least one class")
        self.k = int(k)
        self.beta_prior_sd = beta_prior_sd
        self.sd_prior_scale = sd_prior_scale
        self.lkj_eta = lkj_eta
        self.dirichlet_alpha = dirichlet_alpha
        self.ordered_intercepts = ordered_intercepts
        self._stats_cache: dict[int, tuple] = {}

    @property
    def q(self) -> int:
        return 7 * self.k

    @property
    def n_constrained(self) -> int:
        return 7 * self.k + 1

    @property
    def param_names(self) -> list[str]:
        ks = range(1, self.k + 1)
        names = []
        for stem in ("beta0", "beta1", "beta2", "sd_intercept", "sd_slope", "rho"):
            names += [f"{stem}.{i}" for i in ks]
        names.append("sigma_e")
        names += [f"pi.{i}" for i in ks]
        return names

    def _stick_forward(self, y):
        """Unconstrained (..., K-1) -> simplex (..., K) and log|Jacobian|."""
        k = self.k
        shape = y.shape[:-1]
        pis = np.empty(shape + (k,))
        log_jac = np.zeros(shape)
        remaining = np.ones(shape)
        log_remaining = np.zeros(shape)
        for i in range(k - 1):
            x = y[..., i] - math.log(k - 1 - i)
            log_z = -np.logaddexp(0.0, -x)
            log_1mz = log_z - x
            pis[..., i] = remaining * np.exp(log_z)
            log_jac = log_jac + log_z + log_1mz + log_remaining
            log_remaining = log_remaining + log_1mz
            remaining = np.exp(log_remaining)
        pis[..., k - 1] = remaining
        return pis, log_jac

    def _stick_inverse(self, pis):
        k = self.k
        y = np.empty(pis.shape[:-1] + (k - 1,))
        remaining = np.ones(pis.shape[:-1])
        for i in range(k - 1):
            z = pis[..., i] / remaining
            y[..., i] = np.log(z) - np.log1p(-z) + math.log(k - 1 - i)
            remaining = remaining - pis[..., i]
        return y

    def _blocks(self, u):
        k = self.k
        return {
            "beta0": u[..., 0:k],
            "beta1": u[..., k:2 * k],
            "beta2": u[..., 2 * k:3 * k],
            "log_sd1": u[..., 3 * k:4 * k],
            "log_sd2": u[..., 4 * k:5 * k],
            "atanh_rho": u[..., 5 * k:6 * k],
            "log_sigma_e": u[..., 6 * k],
            "stick": u[..., 6 * k + 1:7 * k],
        }

    def _intercepts(self, raw):
        if not self.ordered_intercepts or self.k == 1:
            return raw.copy()
        steps = np.concatenate([raw[..., :1], np.exp(raw[..., 1:])], axis=-1)
        return np.cumsum(steps, axis=-1)

    def constrain(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.q:
            raise UsageError(f"expected {self.q} unconstrained parameters")
        b = self._blocks(u)
        pis, _ = self._stick_forward(b["stick"])
        return np.concatenate(
            [
                self._intercepts(b["beta0"]),
                b["beta1"],
                b["beta2"],
                np.exp(b["log_sd1"]),
                np.exp(b["log_sd2"]),
                np.tanh(b["atanh_rho"]),
                np.exp(b["log_sigma_e"])[..., None],
                pis,
            ],
            axis=-1,
        )

    def unconstrain(self, c):
        c = np.asarray(c, dtype=float)
        p = self.unpack(c)
        b0 = p["beta0"]
        if self.ordered_intercepts and self.k > 1:
            b0 = np.concatenate([b0[..., :1], np.log(np.diff(b0, axis=-1))], axis=-1)
        return np.concatenate(
            [
                b0,
                p["beta1"],
                p["beta2"],
                np.log(p["sd1"]),
                np.log(p["sd2"]),
                np.arctanh(p["rho"]),
                np.log(p["sigma_e"])[..., None],
                self._stick_inverse(p["pi"]),
            ],
            axis=-1,
        )

    def unpack(self, c):
        c = np.asarray(c, dtype=float)
        if c.shape[-1] != self.n_constrained:
            raise UsageError(f"expected {self.n_constrained} constrained parameters")
        k = self.k
        return {
            "beta0": c[..., 0:k],
            "beta1": c[..., k:2 * k],
            "beta2": c[..., 2 * k:3 * k],
            "sd1": c[..., 3 * k:4 * k],
            "sd2": c[..., 4 * k:5 * k],
            "rho": c[..., 5 * k:6 * k],
            "sigma_e": c[..., 6 * k],
            "pi": c[..., 6 * k + 1:],
        }

    def pack(self, beta, sd1, sd2, rho, sigma_e, pi) -> np.ndarray:
        """Build a constrained vector from a (K, 3) beta table and per-class values."""
        beta = np.asarray(beta, dtype=float).reshape(self.k, 3)
        return np.concatenate(
            [beta[:, 0], beta[:, 1], beta[:, 2], np.ravel(sd1), np.ravel(sd2), np.ravel(rho), [sigma_e], np.ravel(pi)]
        ).astype(float)

    def log_prior(self, u):
        return self._constrain_with_prior(np.asarray(u, dtype=float))[1]

    def _constrain_with_prior(self, u):
        """Constrained point and log prior (with all Jacobians) in one pass."""
        if u.shape[-1] != self.q:
            raise UsageError(f"expected {self.q} unconstrained parameters")
        b = self._blocks(u)
        beta0 = self._intercepts(b["beta0"])
        betas = np.concatenate([beta0, b["beta1"], b["beta2"]], axis=-1)
        inv_var = 1.0 / self.beta_prior_sd**2
        lp = -0.5 * inv_var * (betas * betas).sum(axis=-1) + self._prior_const
        if self.ordered_intercepts and self.k > 1:
            lp = lp + b["beta0"][..., 1:].sum(axis=-1)
        log_sd = u[..., 3 * self.k:5 * self.k]
        sd = np.exp(log_sd)
        log_sig = b["log_sigma_e"]
        sig = np.exp(log_sig)
        inv_scale = 1.0 / self.sd_prior_scale**2
        lp = lp + (log_sd - 0.5 * inv_scale * sd * sd).sum(axis=-1) + log_sig - 0.5 * inv_scale * sig * sig
        rho = np.tanh(b["atanh_rho"])
        lp = lp + (self.lkj_eta * np.log1p(-rho * rho)).sum(axis=-1)
        parts = [betas, sd, rho, sig[..., None]]
        if self.k > 1:
            pis, log_jac = self._stick_forward(b["stick"])
            with np.errstate(divide="ignore"):
                lp = lp + ((self.dirichlet_alpha - 1.0) * np.log(pis)).sum(axis=-1) + log_jac
            parts.append(pis)
        else:
            parts.append(np.ones(u.shape[:-1] + (1,)))
        return np.concatenate(parts, axis=-1), lp

    @cached_property
    def _prior_const(self) -> float:
        """Normalizing constants of every prior term, summed."""
        k = self.k
        const = 3 * k * (-0.5 * LOG_2PI - math.log(self.beta_prior_sd))
        if self.ordered_intercepts and k > 1:
            const += gammaln(k + 1)
        # 2K + 1 half-normal scales
        const += (2 * k + 1) * (math.log(2.0) - 0.5 * LOG_2PI - math.log(self.sd_prior_scale))
        eta = self.lkj_eta
        const += k * (-(2 * eta - 1) * math.log(2.0) - (2 * gammaln(eta) - gammaln(2 * eta)))
        if k > 1:
            a = self.dirichlet_alpha
            const += gammaln(k * a) - k * gammaln(a)
        return const

    def class_covariance(self, sd1, sd2, rho, sigma_e, times) -> np.ndarray:
        """``Z Psi Z' + sigma_e^2 I`` for one class and one time vector."""
        z = np.column_stack([np.ones_like(times), times])
        psi = np.array([[sd1 * sd1, rho * sd1 * sd2], [rho * sd1 * sd2, sd2 * sd2]])
        return z @ psi @ z.T + sigma_e**2 * np.eye(times.size)

    def _check(self, data: Dataset):
        if data.design != "gmm":
            raise UsageError("data are not growth-mixture data")

    def pointwise_loglik(self, c, data: Dataset) -> np.ndarray:
        """Length-J log-likelihoods at one constrained point, one class at a time."""
        self._check(data)
        p = self.unpack(np.asarray(c, dtype=float))
        with np.errstate(divide="ignore"):
            log_pi = np.log(p["pi"])
        out = np.empty(data.n_clusters)
        for times, idx, y in data.time_groups():
            x = np.column_stack([np.ones_like(times), times, times**2])
            comps = np.empty((self.k, idx.size))
            for k in range(self.k):
                beta = np.array([p["beta0"][k], p["beta1"][k], p["beta2"][k]])
                cov = self.class_covariance(p["sd1"][k], p["sd2"][k], p["rho"][k], float(p["sigma_e"]), times)
                comps[k] = log_pi[k] + mvn_logpdf(y, x @ beta, SpdMatrix(cov))
            out[idx] = logsumexp(comps, axis=0)
        return out

    def pointwise_loglik_batch(self, c, data: Dataset) -> np.ndarray:
        """(B, J) log-likelihoods for a (B, 7K+1) batch of constrained points."""
        self._check(data)
        c = np.atleast_2d(np.asarray(c, dtype=float))
        out = np.empty((c.shape[0], data.n_clusters))
        for stats in self._group_stats(data):
            idx = stats[0]
            per_point = self.k * idx.size * 4
            for sl in _chunks(c.shape[0], per_point):
                out[sl, idx] = self._group_loglik(c[sl], stats)
        return out

    def _group_stats(self, data: Dataset):
        hit = self._stats_cache.get(id(data))
        if hit is not None and hit[0] is data:
            return hit[1]
        stats = []
        for times, idx, y in data.time_groups():
            z = np.column_stack([np.ones_like(times), times])
            w = np.linalg.inv(z.T @ z)
            t2 = times**2
            gamma = w @ (z.T @ t2)
            t2_perp = t2 - z @ gamma
            # least-squares coefficients of each cluster on Z, centered for accuracy
            b = y @ z @ w
            center = b.mean(axis=0)
            db = b - center
            y_perp = y - b @ z.T
            perp = np.stack([np.ones(idx.size), np.einsum("mt,mt->m", y_perp, y_perp), y_perp @ t2_perp])
            span = np.stack([np.ones(idx.size), db[:, 0], db[:, 1], db[:, 0] ** 2, db[:, 0] * db[:, 1], db[:, 1] ** 2])
            group = {
                "n_t": times.size,
                "w": w,
                "logdet_ztz": float(np.linalg.slogdet(z.T @ z)[1]),
                "gamma": gamma,
                "vv": float(t2_perp @ t2_perp),
                "center": center,
                "perp": perp,
                "span": span,
            }
            stats.append((idx, group))
        self._stats_cache = {id(data): (data, stats)}
        return stats

    def _group_loglik(self, c, stats):
        """(B, m) log-likelihoods for m clusters sharing one time vector.

        With ``V = sigma_e^2 I + Z Psi Z'`` and ``P`` the projection onto the
        columns of Z, a residual ``r`` splits as

        ``r'V^-1 r = |(I - P) r|^2 / sigma_e^2 + e' N^-1 e``,

        where ``e = (Z'Z)^-1 Z'r`` and ``N = Psi + sigma_e^2 (Z'Z)^-1``, and
        ``log|V| = (n - 2) log sigma_e^2 + log|Z'Z| + log|N|``. Each piece is
        a sum of nonnegative terms, so nothing cancels when sigma_e is small
        or Psi is near singular. Both quadratic forms are polynomials in
        per-cluster statistics, so all clusters go through one matrix product.
        """
        _, g = stats
        n_t, w = g["n_t"], g["w"]
        p = self.unpack(c)
        s1sq, s2sq, rho = p["sd1"] ** 2, p["sd2"] ** 2, p["rho"]
        cov12 = rho * p["sd1"] * p["sd2"]
        var_e = (p["sigma_e"] ** 2)[..., None]
        n11 = s1sq + var_e * w[0, 0]
        n22 = s2sq + var_e * w[1, 1]
        n12 = cov12 + var_e * w[0, 1]
        det_n = (
            s1sq * s2sq * (1.0 - rho) * (1.0 + rho)
            + var_e * (s1sq * w[1, 1] + s2sq * w[0, 0] - 2.0 * cov12 * w[0, 1])
            + var_e * var_e * np.linalg.det(w)
        )

        b2 = p["beta2"]
        d1 = p["beta0"] + b2 * g["gamma"][0] - g["center"][0]
        d2 = p["beta1"] + b2 * g["gamma"][1] - g["center"][1]
        # |(I - P)(y - X beta)|^2 = |y_perp|^2 - 2 b2 y_perp.t2_perp + b2^2 |t2_perp|^2
        perp_coef = np.stack([b2 * b2 * g["vv"], np.ones_like(b2), -2.0 * b2], axis=-1)
        # e' adj(N) e with e = (b - center) - d
        span_coef = np.stack(
            [
                n22 * d1 * d1 - 2.0 * n12 * d1 * d2 + n11 * d2 * d2,
                -2.0 * n22 * d1 + 2.0 * n12 * d2,
                2.0 * n12 * d1 - 2.0 * n11 * d2,
                n22,
                -2.0 * n12,
                n11,
            ],
            axis=-1,
        )
        q_perp = np.maximum(perp_coef @ g["perp"], 0.0)
        q_span = np.maximum(span_coef @ g["span"], 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_pi = np.log(p["pi"])
            logdet = (n_t - 2) * np.log(var_e) + g["logdet_ztz"] + np.log(det_n)
            comps = -0.5 * (q_perp / var_e[..., None] + q_span / det_n[..., None])
            comps += (log_pi - 0.5 * (n_t * LOG_2PI + logdet))[..., None]
        # sigma_e underflowed to zero: V is singular and the density is zero
        comps = np.where(np.isnan(comps) | (var_e[..., None] == 0.0), -np.inf, comps)
        if self.k == 1:
            return comps[:, 0]
        top = comps.max(axis=1)
        with np.errstate(invalid="ignore"):
            out = top + np.log(np.exp(comps - top[:, None]).sum(axis=1))
        return np.where(np.isneginf(top), -np.inf, out)

    def loglik_total_batch(self, u, data: Dataset) -> np.ndarray:
        return self.pointwise_loglik_batch(self.constrain(np.atleast_2d(u)), data).sum(axis=1)

    def log_density_batch(self, u, data: Dataset):
        c, lp = self._constrain_with_prior(np.atleast_2d(np.asarray(u, dtype=float)))
        ll = self.pointwise_loglik_batch(c, data).sum(axis=1)
        return ll + lp, ll

    def plugin_deviance(self, c, data: Dataset) -> float:
        return plugin_deviance(self, c, data)

    def to_config(self) -> dict:
        return {
            "design": "gmm",
            "k": self.k,
            "beta_prior_sd": self.beta_prior_sd,
            "sd_prior_scale": self.sd_prior_scale,
            "lkj_eta": self.lkj_eta,
            "dirichlet_alpha": self.dirichlet_alpha,
            "ordered_intercepts": self.ordered_intercepts,
        }


def fa_pointwise_loglik(model: FactorModel, params, data: Dataset) -> np.ndarray:
    return model.pointwise_loglik(params, data)


def gmm_pointwise_loglik(model: GmmModel, params, data: Dataset) -> np.ndarray:
    return model.pointwise_loglik(params, data)


def log_prior(model, params) -> float:
    return float(model.log_prior(params))


def plugin_deviance(model, posterior_mean_constrained, data: Dataset) -> float:
    """Deviance at a single constrained point, typically the posterior mean."""
    c = np.asarray(posterior_mean_constrained, dtype=float)
    if not np.all(np.isfinite(c)):
        raise UsageError("plug-in point must be finite")
    return float(-2.0 * np.sum(model.pointwise_loglik(c, data)))


def model_from_config(cfg: dict):
    cfg = dict(cfg)
    design = cfg.pop("design")
    if design == "fa":
        return FactorModel(**cfg)
    if design == "gmm":
        return GmmModel(**cfg)
    raise UsageError(f"unknown model design {design!r}")
