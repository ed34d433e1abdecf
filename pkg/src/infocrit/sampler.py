"""Adaptive random-walk Metropolis over the unconstrained parameter space.

Chains are advanced in lockstep so one batched log-density call serves all of
them, but each chain draws from its own Philox stream in a fixed order; the
draws are the same as if every chain had been run alone.

Warmup adapts a full proposal covariance in doubling windows (bracketed by
scale-only buffers) and a global scale by Robbins-Monro toward the target
acceptance rate. Everything is frozen once warmup ends.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from scipy.optimize import minimize

from infocrit.criteria import PointwiseLogLik
from infocrit.errors import SamplerError, UsageError
from infocrit.simulate import derive_seed, make_rng

log = logging.getLogger(__name__)

MAX_INIT_TRIES = 100
# iterations' worth of proposal noise drawn per chain at a time
RNG_BLOCK = 1024


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    iters: int = 1000
    thin: int = 1
    seed: int = 0
    target_accept: float = 0.234
    init_radius: float = 2.0
    jitter: float = 1e-8
    init_search: int = 0

    def __post_init__(self):
        if self.chains < 1 or self.warmup < 0 or self.thin < 1 or self.init_search < 0:
            raise UsageError(f"invalid sampler config {self}")
        if self.iters * self.thin < 200:
            raise UsageError("need at least 200 post-warmup iterations")

    def chain_seeds(self) -> list[int]:
        return [derive_seed(self.seed, "chain", c) for c in range(self.chains)]


@dataclass
class ChainSet:
    """Retained draws of every chain. Arrays are indexed (chain, draw, ...)."""

    unconstrained: np.ndarray
    constrained: np.ndarray
    log_posterior: np.ndarray
    loglik_total: np.ndarray
    acceptance_rate: np.ndarray
    seeds: list[int]
    warmup: int
    thin: int
    param_names: list[str]
    proposal_cov: np.ndarray
    proposal_scale: np.ndarray
    adaptation_log: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.unconstrained.shape[0]

    @property
    def n_draws(self) -> int:
        return self.unconstrained.shape[1]

    def pooled_constrained(self) -> np.ndarray:
        return self.constrained.reshape(-1, self.constrained.shape[-1])

    def posterior_mean(self) -> np.ndarray:
        """Constrained-scale posterior mean pooled over all chains."""
        return self.pooled_constrained().mean(axis=0)

    def chain_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_chains), self.n_draws)

    def select_chains(self, order) -> "ChainSet":
        order = list(order)
        return ChainSet(
            unconstrained=self.unconstrained[order],
            constrained=self.constrained[order],
            log_posterior=self.log_posterior[order],
            loglik_total=self.loglik_total[order],
            acceptance_rate=self.acceptance_rate[order],
            seeds=[self.seeds[i] for i in order],
            warmup=self.warmup,
            thin=self.thin,
            param_names=self.param_names,
            proposal_cov=self.proposal_cov[order],
            proposal_scale=self.proposal_scale[order],
            adaptation_log=self.adaptation_log,
        )


def _safe_log_density(model, data, u):
    """Batched log density where failures map to -inf for the offending rows."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        try:
            lp, ll = model.log_density_batch(u, data)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            lp = np.full(u.shape[0], -np.inf)
            ll = np.full(u.shape[0], -np.inf)
            for i in range(u.shape[0]):
                try:
                    a, b = model.log_density_batch(u[i:i + 1], data)
                    lp[i], ll[i] = a[0], b[0]
                except (np.linalg.LinAlgError, FloatingPointError, ValueError):
                    pass
    bad = ~(np.isfinite(lp) & np.isfinite(ll))
    lp = np.where(bad, -np.inf, lp)
    return lp, ll


def _mode_search(model, data, x0: np.ndarray, step: float = 1e-6):
    """L-BFGS ascent of the log posterior from ``x0`` with batched forward differences.

    Returns the end point, its log posterior and the inverse-Hessian estimate.
    """
    q = x0.size
    shifts = step * np.eye(q)

    def objective(x):
        lp, _ = _safe_log_density(model, data, np.vstack([x, x + shifts]))
        if not np.all(np.isfinite(lp)):
            return np.inf, np.zeros(q)
        return -lp[0], -(lp[1:] - lp[0]) / step

    with np.errstate(invalid="ignore", over="ignore"):
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": 2000})
    hess_inv = np.asarray(res.hess_inv.todense())
    return res.x, -float(res.fun), 0.5 * (hess_inv + hess_inv.T)


def _adaptation_windows(warmup: int) -> list[int]:
    """Iteration indices (exclusive ends) at which the covariance is re-estimated."""
    if warmup < 150:
        return []
    init_buffer = int(0.15 * warmup)
    term_buffer = int(0.1 * warmup)
    stop = warmup - term_buffer
    ends = []
    start, width = init_buffer, 25
    while True:
        end = start + width
        if end + 2 * width > stop:
            end = stop
        ends.append(end)
        if end >= stop:
            return ends
        start, width = end, 2 * width


def _regularized_cov(draws: np.ndarray, jitter: float) -> np.ndarray:
    n, q = draws.shape
    cov = np.cov(draws, rowvar=False).reshape(q, q)
    cov = (n / (n + 5.0)) * cov + 1e-3 * (5.0 / (n + 5.0)) * np.eye(q)
    return cov + jitter * np.eye(q)


def sample(model, data, config: SamplerConfig | None = None, **overrides) -> ChainSet:
    """Run ``config.chains`` adaptive Metropolis chains on ``model`` given ``data``."""
    if config is None:
        config = SamplerConfig(**overrides)
    elif overrides:
        config = SamplerConfig(**{**config.__dict__, **overrides})
    n_chains, q = config.chains, model.q
    seeds = config.chain_seeds()
    rngs = [make_rng(s) for s in seeds]

    x = np.empty((n_chains, q))
    for c in range(n_chains):
        x[c] = rngs[c].uniform(-config.init_radius, config.init_radius, q)
    lp, ll = _safe_log_density(model, data, x)
    for attempt in range(MAX_INIT_TRIES):
        bad = np.flatnonzero(~np.isfinite(lp))
        if bad.size == 0:
            break
        for c in bad:
            x[c] = rngs[c].uniform(-config.init_radius, config.init_radius, q)
        lp_new, ll_new = _safe_log_density(model, data, x[bad])
        lp[bad], ll[bad] = lp_new, ll_new
    else:
        raise SamplerError(
            f"could not find a finite log posterior after {MAX_INIT_TRIES} initializations "
            f"(chains {np.flatnonzero(~np.isfinite(lp)).tolist()})"
        )

    base_log_scale = math.log(2.38 / math.sqrt(q))
    log_scale = np.full(n_chains, base_log_scale)
    cov = np.broadcast_to(np.eye(q) * 0.01, (n_chains, q, q)).copy()
    if config.init_search:
        for c in range(n_chains):
            best = None
            for attempt in range(config.init_search):
                start = x[c] if attempt == 0 else rngs[c].uniform(-config.init_radius, config.init_radius, q)
                found = _mode_search(model, data, start)
                if np.isfinite(found[1]) and (best is None or found[1] > best[1]):
                    best = found
            if best is not None:
                x[c] = best[0]
                if np.all(np.linalg.eigvalsh(best[2]) > 0):
                    cov[c] = best[2] + config.jitter * np.eye(q)
        lp, ll = _safe_log_density(model, data, x)
    chol = np.linalg.cholesky(cov)
    window_ends = _adaptation_windows(config.warmup)
    window_start = int(0.15 * config.warmup)
    window_draws = []
    gain_t = 0

    n_post = config.iters * config.thin
    keep_u = np.empty((n_chains, config.iters, q))
    keep_lp = np.empty((n_chains, config.iters))
    keep_ll = np.empty((n_chains, config.iters))
    accepted = np.zeros(n_chains)
    adaptation_log = []

    total = config.warmup + n_post
    for it in range(total):
        warm = it < config.warmup
        b = it % RNG_BLOCK
        if b == 0:
            z_block = np.stack([r.standard_normal((RNG_BLOCK, q)) for r in rngs], axis=1)
            log_u_block = np.log(np.stack([r.random(RNG_BLOCK) for r in rngs], axis=1))
        z = z_block[b]
        scale = np.exp(log_scale)
        proposal = x + scale[:, None] * np.einsum("cij,cj->ci", chol, z)
        lp_prop, ll_prop = _safe_log_density(model, data, proposal)
        log_u = log_u_block[b]
        with np.errstate(invalid="ignore", over="ignore"):
            log_ratio = lp_prop - lp
        accept = log_u < log_ratio
        x[accept] = proposal[accept]
        lp[accept] = lp_prop[accept]
        ll[accept] = ll_prop[accept]

        if warm:
            gain_t += 1
            acc_prob = np.exp(np.minimum(0.0, np.nan_to_num(log_ratio, nan=-np.inf)))
            log_scale += (acc_prob - config.target_accept) / gain_t**0.6
            if window_ends and window_start <= it < window_ends[-1]:
                window_draws.append(x.copy())
            if window_ends and it + 1 == window_ends[0]:
                draws = np.stack(window_draws, axis=1)
                cov = np.stack([_regularized_cov(draws[c], config.jitter) for c in range(n_chains)])
                chol = np.linalg.cholesky(cov)
                log_scale[:] = base_log_scale
                gain_t = 0
                adaptation_log.append({"iteration": it + 1, "window_draws": draws.shape[1]})
                window_ends.pop(0)
                window_draws = []
            if it + 1 == config.warmup:
                adaptation_log.append({"iteration": it + 1, "frozen": True, "scale": np.exp(log_scale).tolist()})
        else:
            accepted += accept
            k = it - config.warmup
            if (k + 1) % config.thin == 0:
                s = k // config.thin
                keep_u[:, s] = x
                keep_lp[:, s] = lp
                keep_ll[:, s] = ll

    final_cov = np.einsum("cij,ckj->cik", chol, chol)
    return ChainSet(
        unconstrained=keep_u,
        constrained=model.constrain(keep_u),
        log_posterior=keep_lp,
        loglik_total=keep_ll,
        acceptance_rate=accepted / max(n_post, 1),
        seeds=seeds,
        warmup=config.warmup,
        thin=config.thin,
        param_names=list(model.param_names),
        proposal_cov=final_cov,
        proposal_scale=np.exp(log_scale),
        adaptation_log=adaptation_log,
    )


def pointwise_loglik_draws(model, data, chains: ChainSet) -> PointwiseLogLik:
    """S x J pointwise matrix for all retained draws, chain-major row order."""
    values = model.pointwise_loglik_batch(chains.pooled_constrained(), data)
    return PointwiseLogLik(values, chain_index=chains.chain_index())
