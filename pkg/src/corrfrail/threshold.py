"""Biomarker cutpoint search.

Single-gene scans under the minimum-p or frailty-variance criterion, the
single-sweep stepwise multi-gene search, its repetition over all gene
orderings and starting quartiles, and validation of the chosen partitions by
shared-frailty fits inside each arm.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .coxph import FitOptions, fit_cox_arrays
from .dataset import CompetingRisksDataset, cutoff_grid, dichotomize
from .errors import (
    BudgetExceededError,
    CorrFrailError,
    MonotoneLikelihoodWarning,
    NoAdmissibleCutoffError,
    UndefinedCorrelationError,
)
from .frailty import FrailtyOptions, fit_correlated_frailty
from .pcombine import MonteCarloConfig, monte_carlo_pvalue

QUARTILES = {"Q1": 25.0, "Q2": 50.0, "Q3": 75.0}


@dataclass(frozen=True)
class ModelConfig:
    """Settings shared by the threshold procedures.

    ``covariates=None`` uses every covariate column of the dataset as a
    prognostic factor.  Admissible splits leave at least ``min_fraction`` of
    the subjects and ``min_events`` events of ``cause`` in each arm.
    """

    cause: int = 1
    covariates: tuple | None = None
    grid: str = "percentile"
    points: int = 99
    min_fraction: float = 0.10
    min_events: int = 1
    frailty: FrailtyOptions = FrailtyOptions()
    cox: FitOptions = FitOptions()


@dataclass(frozen=True)
class ThresholdScanResult:
    gene: str
    criterion: str
    cutoffs: np.ndarray
    p_values: np.ndarray
    frailty_variances: np.ndarray | None
    best_by_p: int | None
    best_by_variance: int | None
    excluded: tuple
    n_tests: int

    @property
    def best_cutoff(self):
        idx = self.best_by_p if self.criterion == "min_p" else self.best_by_variance
        return float(self.cutoffs[idx])

    @property
    def best_index(self):
        return self.best_by_p if self.criterion == "min_p" else self.best_by_variance

    def to_rows(self):
        rows = []
        for i, c in enumerate(self.cutoffs):
            rows.append({
                "gene": self.gene,
                "position": i + 1,
                "cutoff": float(c),
                "p_value": float(self.p_values[i]),
                "frailty_variance": float(self.frailty_variances[i]) if self.frailty_variances is not None else math.nan,
            })
        return rows


@dataclass(frozen=True)
class StepwiseResult:
    ordering: tuple
    start: str
    cutoffs: tuple
    p_values: tuple
    start_cutoffs: tuple = ()

    def as_dict(self):
        return dict(zip(self.ordering, self.cutoffs))


@dataclass(frozen=True)
class AllOrderingsResult:
    rows: tuple
    consistency: dict


def _arm_ok(z, event, config):
    n = z.size
    need = config.min_fraction * n
    hi = int(z.sum())
    lo = n - hi
    if lo < need or hi < need:
        return f"arm size {min(lo, hi)} below {config.min_fraction:.0%} of {n}"
    e_hi = int(event[z == 1].sum())
    e_lo = int(event[z == 0].sum())
    if min(e_hi, e_lo) < config.min_events:
        return f"arm with {min(e_hi, e_lo)} events of cause {config.cause}"
    return None


def _base_design(data, config):
    names = data.covariate_names if config.covariates is None else tuple(config.covariates)
    X = data.covariate_matrix(names) if names else np.zeros((data.n, 0))
    return X, names


def _indicator_pvalue(X, indicators, data, config, names):
    """Wald p-values of the indicator columns in one Cox fit; raises on degeneracy."""
    D = np.hstack([X, indicators])
    event = data.status == config.cause
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MonotoneLikelihoodWarning)
        fit = fit_cox_arrays(D, data.time, event, config.cox, names=names, cause=config.cause)
    if fit.monotone_likelihood or any(issubclass(w.category, MonotoneLikelihoodWarning) for w in caught):
        raise CorrFrailError("monotone likelihood (separation)")
    return fit.wald_p_values[X.shape[1]:]


def _grid(values, config):
    return cutoff_grid(values, config.grid, config.points)


def scan_single_gene(data: CompetingRisksDataset, gene, criterion="min_p",
                     config: ModelConfig = ModelConfig(), with_variance=None) -> ThresholdScanResult:
    """Evaluate every admissible cutoff of ``gene``.

    ``criterion`` is ``"min_p"`` (Cox model with the indicator plus
    prognostic covariates), ``"max_fvar"`` or ``"min_fvar"`` (correlated
    frailty model whose two levels are the arms; the cause-of-interest
    frailty variance is recorded).  Ties go to the smallest cutoff.  Frailty
    variances are computed whenever the criterion needs them or
    ``with_variance`` is true.
    """
    if criterion not in ("min_p", "max_fvar", "min_fvar"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if gene not in data.genes:
        raise KeyError(f"unknown gene {gene!r}")
    values = data.genes[gene]
    cutoffs = _grid(values, config)
    X, names = _base_design(data, config)
    event = data.status == config.cause
    want_var = criterion != "min_p" if with_variance is None else (with_variance or criterion != "min_p")

    pv = np.full(cutoffs.size, np.nan)
    fv = np.full(cutoffs.size, np.nan) if want_var else None
    excluded = []
    for i, c in enumerate(cutoffs):
        z = dichotomize(values, c)
        reason = _arm_ok(z, event, config)
        if reason is None:
            try:
                pv[i] = _indicator_pvalue(X, z[:, None].astype(float), data, config, names + (f"{gene}_high",))[0]
            except (CorrFrailError, ArithmeticError, ValueError) as exc:
                if criterion == "min_p":
                    reason = f"cox fit failed: {exc}"
        if reason is None and want_var:
            try:
                fit = fit_correlated_frailty(data.replace(cluster=z.astype(np.int64) + 1), names, config.frailty)
                fv[i] = fit.moments.variances[config.cause - 1]
            except (CorrFrailError, ArithmeticError, ValueError) as exc:
                if criterion != "min_p":
                    reason = f"frailty fit failed: {exc}"
        if reason is not None:
            pv[i] = np.nan
            if fv is not None:
                fv[i] = np.nan
            excluded.append((i, float(c), reason))

    ok_p = np.isfinite(pv)
    best_p = int(np.nanargmin(pv)) if ok_p.any() else None
    best_v = None
    if fv is not None and np.isfinite(fv).any():
        best_v = int(np.nanargmin(fv)) if criterion == "min_fvar" else int(np.nanargmax(fv))
    if (criterion == "min_p" and best_p is None) or (criterion != "min_p" and best_v is None):
        raise NoAdmissibleCutoffError(f"no admissible cutoff for gene {gene!r}")
    return ThresholdScanResult(
        gene=gene,
        criterion=criterion,
        cutoffs=cutoffs,
        p_values=pv,
        frailty_variances=fv,
        best_by_p=best_p,
        best_by_variance=best_v,
        excluded=tuple(excluded),
        n_tests=int(np.isfinite(pv).sum()) if criterion == "min_p" else int(np.isfinite(fv).sum()),
    )


def start_cutoffs(data, genes, start):
    if start not in QUARTILES:
        raise ValueError(f"start must be one of {sorted(QUARTILES)}")
    return [float(np.percentile(data.genes[g], QUARTILES[start], method="linear")) for g in genes]


def _scan_in_context(data, gene, genes, current, config, X, names, cache):
    """Best min-p cutoff of ``gene`` with every other gene held at ``current``."""
    key = (gene, tuple((g, current[g]) for g in genes if g != gene))
    if cache is not None and key in cache:
        return cache[key]
    event = data.status == config.cause
    values = data.genes[gene]
    cutoffs = _grid(values, config)
    others = [g for g in genes if g != gene]
    fixed = np.column_stack([dichotomize(data.genes[g], current[g]) for g in others]).astype(float) \
        if others else np.zeros((data.n, 0))
    colnames = names + tuple(f"{g}_high" for g in others) + (f"{gene}_high",)
    best, best_p = None, np.inf
    for c in cutoffs:
        z = dichotomize(values, c)
        if _arm_ok(z, event, config) is not None:
            continue
        try:
            p = _indicator_pvalue(X, np.hstack([fixed, z[:, None]]), data, config, colnames)[-1]
        except (CorrFrailError, ArithmeticError, ValueError):
            continue
        if p < best_p:
            best, best_p = float(c), p
    if best is None:
        raise NoAdmissibleCutoffError(f"no admissible cutoff for gene {gene!r}")
    if cache is not None:
        cache[key] = best
    return best


def stepwise_multi_gene(data: CompetingRisksDataset, genes, start="Q2",
                        config: ModelConfig = ModelConfig(), _cache=None) -> StepwiseResult:
    """Single backward sweep of coordinate-wise min-p cutoff selection.

    Genes ``1..G-1`` start at the ``start`` quartile; gene ``G`` is scanned
    with all ``G`` indicators in one Cox model and fixed at its optimum, then
    gene ``G-1`` (genes ``1..G-2`` still at their starts), down to gene 1.
    """
    genes = tuple(genes)
    for g in genes:
        if g not in data.genes:
            raise KeyError(f"unknown gene {g!r}")
    X, names = _base_design(data, config)
    starts = start_cutoffs(data, genes, start)
    current = dict(zip(genes, starts))
    for g in reversed(genes):
        current[g] = _scan_in_context(data, g, genes, current, config, X, names, _cache)
    ind = np.column_stack([dichotomize(data.genes[g], current[g]) for g in genes]).astype(float)
    try:
        final = _indicator_pvalue(X, ind, data, config, names + tuple(f"{g}_high" for g in genes))
    except (CorrFrailError, ArithmeticError, ValueError):
        final = np.full(len(genes), np.nan)
    return StepwiseResult(
        ordering=genes,
        start=start,
        cutoffs=tuple(current[g] for g in genes),
        p_values=tuple(float(p) for p in final),
        start_cutoffs=tuple(starts),
    )


def all_orderings(data, genes, starts=("Q1", "Q2", "Q3"), config: ModelConfig = ModelConfig(),
                  budget=None) -> AllOrderingsResult:
    """Stepwise search for every gene permutation and starting quartile.

    Rows are ordered by permutation (lexicographic in the given gene order),
    then by start.  ``consistency`` maps each gene to the sorted distinct
    cutoffs found across rows.  If ``G! * len(starts)`` exceeds ``budget`` the
    first ``budget`` runs are done and :class:`BudgetExceededError` carries them.
    """
    genes = tuple(genes)
    cells = [(perm, s) for perm in itertools.permutations(genes) for s in starts]
    cache = {}
    rows = []
    limit = len(cells) if budget is None else min(budget, len(cells))
    for perm, s in cells[:limit]:
        rows.append(stepwise_multi_gene(data, perm, s, config, _cache=cache))
    if limit < len(cells):
        raise BudgetExceededError(f"{len(cells)} runs requested, budget {budget}", rows)
    return AllOrderingsResult(rows=tuple(rows), consistency=consistency_report(rows))


def consistency_report(rows):
    found = {}
    for r in rows:
        for g, c in zip(r.ordering, r.cutoffs):
            found.setdefault(g, set()).add(c)
    return {g: sorted(v) for g, v in found.items()}


@dataclass(frozen=True)
class PartitionVariance:
    gene: str
    cutoff: float
    lower_fvar: float | None
    upper_fvar: float | None
    lower_note: str = ""
    upper_note: str = ""


def validate_partitions(data, cutoffs, distribution="gamma", config: ModelConfig = ModelConfig()):
    """Shared-frailty variance below and above each gene's cutoff.

    Every subject carries its own frailty inside an arm.  An arm without
    events of the cause of interest (or whose fit fails) is reported as
    ``None`` with the reason in the matching note.
    """
    from .shared_frailty import fit_shared_frailty

    _, names = _base_design(data, config)
    out = []
    for gene, c in cutoffs.items():
        z = dichotomize(data.genes[gene], c)
        res = {}
        for side, mask in (("lower", z == 0), ("upper", z == 1)):
            sub = data.subset(mask)
            if sub.n < 2 or not np.any(sub.status == config.cause):
                res[side] = (None, "no events in arm" if sub.n >= 2 else "arm too small")
                continue
            try:
                fit = fit_shared_frailty(sub, distribution, "subject", config.cause, names)
                res[side] = (float(fit.variance), "")
            except (CorrFrailError, ArithmeticError, ValueError) as exc:
                res[side] = (None, f"fit failed: {exc}")
        out.append(PartitionVariance(gene, float(c), res["lower"][0], res["upper"][0],
                                     res["lower"][1], res["upper"][1]))
    return out


def pvalue_variance_correlation(scan: ThresholdScanResult) -> float:
    """Spearman correlation between a scan's p-values and frailty variances."""
    if scan.frailty_variances is None:
        raise ValueError("scan carries no frailty variances")
    ok = np.isfinite(scan.p_values) & np.isfinite(scan.frailty_variances)
    p, v = scan.p_values[ok], scan.frailty_variances[ok]
    if p.size < 2 or np.ptp(p) == 0 or np.ptp(v) == 0:
        raise UndefinedCorrelationError("rank correlation undefined for a constant sequence")
    return float(spearmanr(p, v).statistic)


def combined_evidence(scans, kind="fisher", mc: MonteCarloConfig = MonteCarloConfig()):
    """Combine the selected p-value of each scan into one Monte-Carlo p-value.

    The selected p-values are minima over many cutoffs, so the combination is
    descriptive rather than a calibrated test.
    """
    p = [float(s.p_values[s.best_by_p]) for s in scans]
    return monte_carlo_pvalue(p, kind, mc)
