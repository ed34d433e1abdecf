"""Information criteria from posterior draws of pointwise log-likelihoods.

All criteria are on the deviance scale (lower is better). Posterior variances
use the n-1 denominator throughout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from infocrit.errors import NumericInputError, UsageError
from infocrit.numerics import log_mean_exp

#: Per-cluster posterior variance of the log-likelihood above which WAIC is unreliable.
PWAIC_VAR_THRESHOLD = 0.4

PDIC_NEGATIVE = "PDIC_NEGATIVE"
PWAIC_UNRELIABLE = "PWAIC_UNRELIABLE"
PARETO_K_HIGH = "PARETO_K_HIGH"
PLUGIN_MISSING = "PLUGIN_MISSING"
PSIS_DEGRADED = "PSIS_DEGRADED"


@dataclass(frozen=True)
class PointwiseLogLik:
    """S x J matrix of log f(y_j | theta^s), draws in rows, clusters in columns.

    ``chain_index`` optionally maps each row to the chain that produced it.
    """

    values: np.ndarray
    chain_index: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise UsageError(f"log-likelihood matrix must be 2-D, got {v.ndim}-D")
        if v.shape[0] < 2:
            raise UsageError("need at least 2 posterior draws")
        if v.shape[1] < 1:
            raise UsageError("need at least 1 cluster")
        if np.isnan(v).any():
            raise NumericInputError("log-likelihood matrix contains NaN")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.chain_index is not None:
            ci = np.asarray(self.chain_index, dtype=int)
            if ci.shape != (v.shape[0],):
                raise UsageError("chain_index must have one entry per draw")
            _, counts = np.unique(ci, return_counts=True)
            if counts.min() < 2:
                raise UsageError("every chain needs at least 2 draws")
            ci.setflags(write=False)
            object.__setattr__(self, "chain_index", ci)

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.values.shape[1]


def _as_loglik(ll) -> PointwiseLogLik:
    return ll if isinstance(ll, PointwiseLogLik) else PointwiseLogLik(ll)


def deviance_from_pointwise(ll) -> np.ndarray:
    """Deviance draws ``D(theta^s) = -2 * sum_j l_j(theta^s)``."""
    return -2.0 * _as_loglik(ll).values.sum(axis=1)


def p_dic(mean_deviance: float, plugin_deviance: float) -> float:
    """Classic effective number of parameters ``E[D] - D(plug-in)``.

    The result can be negative; that is a diagnostic, not an error.
    """
    if not (math.isfinite(mean_deviance) and math.isfinite(plugin_deviance)):
        raise UsageError("p_dic needs finite deviances")
    return float(mean_deviance - plugin_deviance)


def p_v(deviance) -> float:
    """Half the posterior variance of the deviance."""
    d = np.asarray(deviance, dtype=float).ravel()
    if d.size < 2:
        raise UsageError("p_v needs at least 2 deviance draws")
    return float(0.5 * np.var(d, ddof=1))


@dataclass(frozen=True)
class WaicResult:
    waic: float
    lppd: float
    p_waic: float
    lppd_j: np.ndarray
    var_lj: np.ndarray
    flags: frozenset


def waic(ll) -> WaicResult:
    """WAIC with the variance-based penalty.

    ``lppd_j`` is the log of the posterior-mean likelihood of cluster j, computed
    by log-sum-exp so that very negative log-likelihoods do not underflow.
    """
    v = _as_loglik(ll).values
    lppd_j = log_mean_exp(v, axis=0)
    var_lj = np.var(v, axis=0, ddof=1)
    lppd = float(np.sum(lppd_j))
    pw = float(np.sum(var_lj))
    flags = frozenset({PWAIC_UNRELIABLE}) if np.any(var_lj > PWAIC_VAR_THRESHOLD) else frozenset()
    return WaicResult(-2.0 * lppd + 2.0 * pw, lppd, pw, lppd_j, var_lj, flags)


@dataclass(frozen=True)
class DicFamily:
    mean_deviance: float
    p_v: float
    dic_i: float
    plugin_deviance: float | None = None
    p_dic: float | None = None
    dic: float | None = None
    dic_p: float | None = None
    flags: frozenset = frozenset()


def dic_family(deviance, plugin_deviance: float | None = None) -> DicFamily:
    """DIC_i always; classic DIC and DIC_p when a plug-in deviance is given."""
    d = np.asarray(deviance, dtype=float).ravel()
    mean_d = float(np.mean(d))
    pv = p_v(d)
    dic_i = mean_d + pv
    if plugin_deviance is None:
        return DicFamily(mean_d, pv, dic_i, flags=frozenset({PLUGIN_MISSING}))
    plugin = float(plugin_deviance)
    pd = p_dic(mean_d, plugin)
    flags = frozenset({PDIC_NEGATIVE}) if pd < 0 else frozenset()
    return DicFamily(
        mean_deviance=mean_d,
        p_v=pv,
        dic_i=dic_i,
        plugin_deviance=plugin,
        p_dic=pd,
        dic=plugin + 2.0 * pd,
        dic_p=plugin + 2.0 * pv,
        flags=flags,
    )


@dataclass(frozen=True)
class LppdDecomposition:
    """Per-cluster split ``log E[f_j] = E[l_j] + Var[l_j]/2 + R_j``."""

    mean_lj: np.ndarray
    half_var_lj: np.ndarray
    remainder: np.ndarray

    @property
    def total_remainder(self) -> float:
        return float(np.sum(self.remainder))


def lppd_decomposition(ll) -> LppdDecomposition:
    v = _as_loglik(ll).values
    mean_lj = v.mean(axis=0)
    half_var = 0.5 * np.var(v, axis=0, ddof=1)
    lme = log_mean_exp(v, axis=0)
    return LppdDecomposition(mean_lj, half_var, lme - mean_lj - half_var)


@dataclass
class ClusterRecord:
    j: int
    lppd_j: float
    var_lj: float
    khat_j: float | None


@dataclass
class CriteriaReport:
    """Every criterion and penalty for one fitted model.

    Field names are part of the JSON contract; see :meth:`to_dict`.
    """

    n_draws: int
    n_clusters: int
    mean_deviance: float
    p_v: float
    dic_i: float
    lppd: float
    p_waic: float
    waic: float
    plugin_deviance: float | None = None
    p_dic: float | None = None
    dic: float | None = None
    dic_p: float | None = None
    loo: float | None = None
    p_loo: float | None = None
    lppd_loo: float | None = None
    total_remainder: float | None = None
    psis_tail_length: int | None = None
    flags: list[str] = field(default_factory=list)
    per_cluster: list[ClusterRecord] = field(default_factory=list)

    @property
    def khat(self) -> list[float | None]:
        return [c.khat_j for c in self.per_cluster]

    def to_dict(self, per_cluster: bool = True) -> dict:
        out = asdict(self)
        out["khat"] = self.khat
        if not per_cluster:
            out.pop("per_cluster")
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CriteriaReport":
        data = dict(data)
        data.pop("khat", None)
        clusters = [ClusterRecord(**c) for c in data.pop("per_cluster", [])]
        return cls(**data, per_cluster=clusters)


def compute_all(ll, plugin_deviance: float | None = None, with_loo: bool = True) -> CriteriaReport:
    """Compute the full :class:`CriteriaReport` for one pointwise matrix.

    E[D] pools all retained draws regardless of ``chain_index``.
    """
    from infocrit.psis import psis_loo

    ll = _as_loglik(ll)
    dev = deviance_from_pointwise(ll)
    fam = dic_family(dev, plugin_deviance)
    w = waic(ll)
    decomp = lppd_decomposition(ll)
    flags = set(fam.flags) | set(w.flags)

    loo = p_loo = lppd_loo = tail = None
    khat = [None] * ll.n_clusters
    if with_loo:
        ps = psis_loo(ll, lppd_j=w.lppd_j)
        loo, p_loo, lppd_loo, tail = ps.loo, ps.p_loo, ps.lppd_loo, ps.tail_length
        khat = [None if not np.isfinite(k) else float(k) for k in ps.khat]
        flags |= set(ps.flags)

    per = [
        ClusterRecord(j=int(j), lppd_j=float(w.lppd_j[j]), var_lj=float(w.var_lj[j]), khat_j=khat[j])
        for j in range(ll.n_clusters)
    ]
    return CriteriaReport(
        n_draws=ll.n_draws,
        n_clusters=ll.n_clusters,
        mean_deviance=fam.mean_deviance,
        p_v=fam.p_v,
        dic_i=fam.dic_i,
        lppd=w.lppd,
        p_waic=w.p_waic,
        waic=w.waic,
        plugin_deviance=fam.plugin_deviance,
        p_dic=fam.p_dic,
        dic=fam.dic,
        dic_p=fam.dic_p,
        loo=loo,
        p_loo=p_loo,
        lppd_loo=lppd_loo,
        total_remainder=decomp.total_remainder,
        psis_tail_length=tail,
        flags=sorted(flags),
        per_cluster=per,
    )
