"""Bayesian predictive information criteria for latent-variable models.

Computes DIC, DIC_p, the plug-in-free DIC_i, WAIC and PSIS-LOO from a matrix of
pointwise marginal log-likelihoods, plus a desk-scale simulation harness for
one-factor analysis and growth mixture models.
"""

from infocrit.criteria import (
    CriteriaReport,
    PointwiseLogLik,
    compute_all,
    deviance_from_pointwise,
    dic_family,
    lppd_decomposition,
    p_dic,
    p_v,
    waic,
)
from infocrit.errors import InfocritError, NotPositiveDefiniteError, NumericInputError, UsageError
from infocrit.psis import psis_loo

__all__ = [
    "CriteriaReport",
    "InfocritError",
    "NotPositiveDefiniteError",
    "NumericInputError",
    "PointwiseLogLik",
    "UsageError",
    "compute_all",
    "deviance_from_pointwise",
    "dic_family",
    "lppd_decomposition",
    "p_dic",
    "p_v",
    "psis_loo",
    "waic",
]

__version__ = "0.1.0"
