"""Convergence and switching diagnostics for multi-chain output."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from infocrit.errors import UsageError

#: Chains whose loading means all lie within this of zero carry no sign.
SIGN_ZERO_TOL = 1e-6
INDETERMINATE = "INDETERMINATE"
WITHIN_CHAIN_SUSPECT = "WITHIN_CHAIN_SUSPECT"
RHAT_OK = 1.1


def _as_chains(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim != 2:
        raise UsageError("expected a (chains, draws) array")
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise UsageError("R-hat needs at least 2 chains of at least 4 draws")
    return x


def _psrf(x: np.ndarray) -> float:
    n = x.shape[1]
    b = n * np.var(x.mean(axis=1), ddof=1)
    w = float(np.mean(np.var(x, axis=1, ddof=1)))
    if b == 0.0:
        return 1.0
    if w == 0.0:
        return math.inf
    return math.sqrt(((n - 1) / n * w + b / n) / w)


def classic_rhat(draws) -> float:
    """Gelman-Rubin potential scale reduction for one parameter.

    Parameters
    ----------
    draws : array_like, shape (C, n)
        One row per chain.

    Returns
    -------
    float
        ``sqrt(((n-1)/n W + B/n) / W)``. ``inf`` when the chains are
        internally constant but disagree. Exactly 1 when the chain means
        coincide (B = 0), where the formula alone would give ``sqrt((n-1)/n)``.
    """
    return _psrf(_as_chains(draws))


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    # odd lengths drop the middle draw
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def rank_normalized_split_rhat(draws) -> float:
    """Classic R-hat of split chains after joint rank normalization.

    Ties get their average rank, so the statistic depends on the draws only
    through their ordering.
    """
    x = _split(_as_chains(draws))
    ranks = rankdata(x, method="average").reshape(x.shape)
    z = ndtri((ranks - 0.375) / (x.size + 0.25))
    return _psrf(z)


@dataclass
class RhatReport:
    param_names: list[str]
    classic: np.ndarray
    rank_split: np.ndarray

    @property
    def rhat_max(self) -> float:
        return float(np.max(self.classic))

    def to_dict(self) -> dict:
        return {
            "param_names": list(self.param_names),
            "classic_rhat": [float(v) for v in self.classic],
            "rank_normalized_split_rhat": [float(v) for v in self.rank_split],
            "rhat_max": self.rhat_max,
        }


def rhat_report(chains, param_names=None) -> RhatReport:
    """R-hat of every constrained parameter of a ChainSet or a (C, n, p) array.

    The log posterior is not included.
    """
    draws = chains.constrained if hasattr(chains, "constrained") else np.asarray(chains, dtype=float)
    if draws.ndim != 3:
        raise UsageError("expected draws shaped (chains, draws, parameters)")
    if param_names is None:
        param_names = getattr(chains, "param_names", None) or [f"p{i}" for i in range(draws.shape[2])]
    classic = np.array([classic_rhat(draws[:, :, i]) for i in range(draws.shape[2])])
    rank = np.array([rank_normalized_split_rhat(draws[:, :, i]) for i in range(draws.shape[2])])
    return RhatReport(list(param_names), classic, rank)


@dataclass
class SwitchReport:
    sign_switch: bool | None
    chain_signs: list[int]
    loading_means: np.ndarray
    notes: list[str] = field(default_factory=list)

    @property
    def indeterminate(self) -> bool:
        return self.sign_switch is None

    def to_dict(self) -> dict:
        return {
            "sign_switch": self.sign_switch,
            "chain_signs": list(self.chain_signs),
            "loading_means": self.loading_means.tolist(),
            "notes": list(self.notes),
        }


def classify_loading_means(means) -> SwitchReport:
    """Sign-switch call from a (C, n) table of per-chain loading means.

    Each chain's sign is that of its projection on the pooled absolute-mean
    vector, so small loadings that straddle zero do not decide the call.
    """
    m = np.asarray(means, dtype=float)
    if m.ndim != 2 or m.shape[0] < 1:
        raise UsageError("expected a (chains, loadings) table of means")
    if np.any(np.all(np.abs(m) <= SIGN_ZERO_TOL, axis=1)):
        return SwitchReport(None, [0] * m.shape[0], m, [INDETERMINATE])
    direction = np.abs(m).mean(axis=0)
    proj = m @ direction
    signs = np.sign(proj).astype(int)
    if np.any(signs == 0):
        return SwitchReport(None, signs.tolist(), m, [INDETERMINATE])
    return SwitchReport(bool(np.unique(signs).size > 1), signs.tolist(), m)


def detect_sign_switch(chains, model) -> SwitchReport:
    """Between-chain loading sign disagreement for a factor-model ChainSet."""
    if not hasattr(model, "loading_slice"):
        raise UsageError("sign-switch detection needs a factor model")
    loadings = chains.constrained[:, :, model.loading_slice]
    return classify_loading_means(loadings.mean(axis=1))


def within_chain_suspect(rhat_max: float, p_dic: float | None) -> bool:
    """Negative p_dic although R-hat says the chains agree."""
    return p_dic is not None and p_dic < 0 and rhat_max < RHAT_OK


def correspondence(p_dic_values, switch_reports) -> dict:
    """Agreement between ``p_dic < 0`` and the sign-switch call.

    INDETERMINATE replicates are left out of the rate.
    """
    agree = used = 0
    for pd, rep in zip(p_dic_values, switch_reports):
        if rep.sign_switch is None:
            continue
        used += 1
        agree += int((pd < 0) == rep.sign_switch)
    return {
        "n_replicates": len(switch_reports),
        "n_used": used,
        "n_agree": agree,
        "agreement": agree / used if used else math.nan,
    }
