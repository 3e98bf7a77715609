"""Combination of independent p-values with Monte-Carlo calibration.

Every combiner is ``Y = sum T(p_i)`` (Tippett: ``min p_i``) and every one is
small-significant: shrinking any ``p_i`` can only shrink ``Y``.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

BLOCK = 10_000


class CombinerKind(enum.Enum):
    FISHER = "fisher"
    PEARSON = "pearson"
    MUDHOLKAR_GEORGE = "mudholkar-george"
    EDGINGTON = "edgington"
    TIPPETT = "tippett"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("_", "-")
        aliases = {"mudholkargeorge": "mudholkar-george", "mg": "mudholkar-george", "logit": "mudholkar-george"}
        return cls(aliases.get(key, key))

    @property
    def singular_at_bounds(self):
        return self in (CombinerKind.FISHER, CombinerKind.PEARSON, CombinerKind.MUDHOLKAR_GEORGE)

    @property
    def small_significant(self):
        return True

    def statistic(self, p, axis=-1):
        p = np.asarray(p, dtype=float)
        if self is CombinerKind.FISHER:
            return np.log(p).sum(axis=axis)
        if self is CombinerKind.PEARSON:
            return -np.log1p(-p).sum(axis=axis)
        if self is CombinerKind.MUDHOLKAR_GEORGE:
            return (np.log(p) - np.log1p(-p)).sum(axis=axis)
        if self is CombinerKind.EDGINGTON:
            return p.sum(axis=axis)
        return p.min(axis=axis)


@dataclass(frozen=True)
class MonteCarloConfig:
    M: int = 100_000
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")


@dataclass(frozen=True)
class CombinedPValue:
    kind: str
    statistic: float
    p_mc: float
    p_mc_uncorrected: float
    exceed: int
    M: int
    p_analytic: float | None = None

    def to_dict(self):
        out = {
            "method": self.kind,
            "statistic": self.statistic,
            "p_mc": self.p_mc,
            "p_mc_uncorrected": self.p_mc_uncorrected,
            "M": self.M,
        }
        if self.p_analytic is not None:
            out["p_analytic"] = self.p_analytic
        return out


def _validate(pvalues, kind):
    p = np.asarray(pvalues, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("need at least one p-value")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    if kind.singular_at_bounds and np.any((p == 0) | (p == 1)):
        raise ValueError(f"{kind.value} transform is singular at p = 0 or p = 1; clamp explicitly")
    return p


def combine_statistic(pvalues, kind="fisher") -> float:
    kind = CombinerKind.parse(kind)
    return float(kind.statistic(_validate(pvalues, kind)))


def _count_block(kind, n, y0, size, seed_seq):
    rng = np.random.default_rng(seed_seq)
    u = rng.random((size, n))
    y = kind.statistic(u, axis=1)
    return int(np.count_nonzero(y <= y0))


def monte_carlo_pvalue(pvalues, kind="fisher", config: MonteCarloConfig = MonteCarloConfig()) -> CombinedPValue:
    """Monte-Carlo combined p-value ``(1 + #{Y_j <= Y_0}) / (M + 1)``.

    Replicates are drawn in fixed blocks of 10 000, each from its own child
    of ``SeedSequence(seed)``, so the result does not depend on ``n_jobs``.
    The uncorrected proportion ``#{Y_j <= Y_0} / M`` is reported alongside.
    """
    kind = CombinerKind.parse(kind)
    p = _validate(pvalues, kind)
    y0 = float(kind.statistic(p))
    sizes = [BLOCK] * (config.M // BLOCK) + ([config.M % BLOCK] if config.M % BLOCK else [])
    children = np.random.SeedSequence(config.seed).spawn(len(sizes))
    args = [(kind, p.size, y0, s, c) for s, c in zip(sizes, children)]
    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as ex:
            counts = list(ex.map(lambda a: _count_block(*a), args))
    else:
        counts = [_count_block(*a) for a in args]
    exceed = sum(counts)
    analytic = None
    if kind is CombinerKind.FISHER:
        analytic = fisher_analytic(p)
    elif kind is CombinerKind.TIPPETT:
        analytic = tippett_analytic(p)
    return CombinedPValue(
        kind=kind.value,
        statistic=y0,
        p_mc=(1 + exceed) / (config.M + 1),
        p_mc_uncorrected=exceed / config.M,
        exceed=exceed,
        M=config.M,
        p_analytic=analytic,
    )


def fisher_analytic(pvalues) -> float:
    """Upper chi-square(2n) tail of ``-2 sum log p_i``."""
    p = _validate(pvalues, CombinerKind.FISHER)
    return float(chi2.sf(-2.0 * np.log(p).sum(), 2 * p.size))


def tippett_analytic(pvalues) -> float:
    """``1 - (1 - min p)^n``."""
    p = _validate(pvalues, CombinerKind.TIPPETT)
    return float(-np.expm1(p.size * np.log1p(-p.min())))
