"""Replicate datasets for the factor-analysis and growth-mixture designs.

Every dataset is a pure function of (master seed, design, condition,
replicate): seeds come from a SHA-256 hash chain and feed a counter-based
Philox generator, so any cell can be regenerated on its own.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from infocrit.errors import UsageError
from infocrit.models import Dataset

FA_BASE_LOADINGS = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4)
FA_C_LEVELS = (0.3, 0.6, 0.9)
FA_SIGMA2_LEVELS = (0.5, 1.0)
FA_J_LEVELS = (400, 800)

GMM_CONDITIONS = ("ug1", "ug2", "us1", "us2", "bg1", "bg2", "bs1", "bs2")
GMM_TIMES = np.arange(5.0)
GMM_SD = ((0.8, 0.6), (0.5, 0.3))
GMM_RHO = (0.2, 0.8)


def derive_seed(master_seed: int, *path) -> int:
    """Deterministic 63-bit seed for a node in the seed tree."""
    text = "/".join([str(int(master_seed))] + [str(p) for p in path])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class FaCondition:
    c: float
    sigma2: float
    J: int
    replicate: int = 0
    master_seed: int = 20250101

    def __post_init__(self):
        if self.J < 2 or self.sigma2 <= 0 or self.c < 0:
            raise UsageError(f"invalid factor-analysis condition {self}")

    @property
    def name(self) -> str:
        return f"c{self.c:g}_s{self.sigma2:g}_J{self.J}"

    @property
    def loadings(self) -> np.ndarray:
        return self.c * np.asarray(FA_BASE_LOADINGS)

    @property
    def seed(self) -> int:
        return derive_seed(self.master_seed, "fa", self.name, self.replicate)

    def population_covariance(self) -> np.ndarray:
        lam = self.loadings
        return np.outer(lam, lam) + self.sigma2 * np.eye(lam.size)


@dataclass(frozen=True)
class GmmCondition:
    name: str
    replicate: int = 0
    master_seed: int = 20250101

    def __post_init__(self):
        if self.name not in GMM_CONDITIONS:
            raise UsageError(f"unknown GMM condition {self.name!r}; expected one of {GMM_CONDITIONS}")

    @property
    def balanced(self) -> bool:
        return self.name[0] == "b"

    @property
    def greater_separation(self) -> bool:
        return self.name[1] == "g"

    @property
    def pi1(self) -> float:
        return 0.5 if self.balanced else 0.2

    @property
    def J(self) -> int:
        return 250 if self.balanced else 400

    @property
    def sigma_e(self) -> float:
        return 1.0 if self.name[2] == "1" else 2.0

    @property
    def beta(self) -> np.ndarray:
        """(2, 3) table of class intercepts, linear and quadratic slopes."""
        if self.greater_separation:
            b0, b1 = (6.0, 10.0), (0.3, 2.7)
        else:
            b0, b1 = (6.0, 8.0), (0.3, 1.5)
        return np.array([[b0[0], b1[0], 0.0], [b0[1], b1[1], 0.0]])

    def psi(self, k: int) -> np.ndarray:
        s1, s2 = GMM_SD[k]
        r = GMM_RHO[k]
        return np.array([[s1 * s1, r * s1 * s2], [r * s1 * s2, s2 * s2]])

    @property
    def seed(self) -> int:
        return derive_seed(self.master_seed, "gmm", self.name, self.replicate)

    def true_params(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "sd": [list(s) for s in GMM_SD],
            "rho": list(GMM_RHO),
            "sigma_e": self.sigma_e,
            "pi": [self.pi1, 1.0 - self.pi1],
        }


def generate_fa(cond: FaCondition) -> Dataset:
    """One-factor data with zero intercepts: ``y_j = lambda eta_j + e_j``."""
    rng = make_rng(cond.seed)
    lam = cond.loadings
    eta = rng.standard_normal(cond.J)
    noise = rng.standard_normal((cond.J, lam.size)) * np.sqrt(cond.sigma2)
    y = eta[:, None] * lam[None, :] + noise
    meta = {
        "design": "fa",
        "condition": cond.name,
        "c": cond.c,
        "sigma2": cond.sigma2,
        "J": cond.J,
        "replicate": cond.replicate,
        "master_seed": cond.master_seed,
        "seed": cond.seed,
    }
    return Dataset("fa", y, meta=meta)


def generate_gmm(cond: GmmCondition) -> Dataset:
    """Two-class linear growth data on five equidistant occasions."""
    rng = make_rng(cond.seed)
    t = GMM_TIMES
    classes = np.where(rng.random(cond.J) < cond.pi1, 0, 1)
    beta = cond.beta
    chol = [np.linalg.cholesky(cond.psi(k)) for k in range(2)]
    eta = rng.standard_normal((cond.J, 2))
    noise = rng.standard_normal((cond.J, t.size)) * cond.sigma_e
    ys = []
    for j in range(cond.J):
        k = classes[j]
        e0, e1 = chol[k] @ eta[j]
        b = beta[k]
        ys.append(b[0] + e0 + (b[1] + e1) * t + b[2] * t**2 + noise[j])
    meta = {
        "design": "gmm",
        "condition": cond.name,
        "J": cond.J,
        "pi1": cond.pi1,
        "sigma_e": cond.sigma_e,
        "replicate": cond.replicate,
        "master_seed": cond.master_seed,
        "seed": cond.seed,
        "classes": classes.tolist(),
        "true_params": cond.true_params(),
    }
    return Dataset("gmm", tuple(ys), times=tuple(t.copy() for _ in range(cond.J)), meta=meta)
