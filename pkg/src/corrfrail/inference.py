"""Interval estimates by cluster bootstrap and simulation-study summaries."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import CompetingRisksDataset
from .errors import CorrFrailError, FewClustersWarning

MIN_CLUSTERS = 20


def parameter_vector(fit):
    """Flatten a correlated-frailty fit into ``(names, values)``."""
    names, vals = [], []
    for j, cf in enumerate(fit.cause_fits, start=1):
        for nm, b in zip(cf.covariate_names, cf.beta):
            names.append(f"beta[{j},{nm}]")
            vals.append(float(b))
    for j, xi in enumerate(fit.moments.variances, start=1):
        names.append(f"xi[{j}]")
        vals.append(float(xi))
    for (a, b), r in fit.moments.pairs().items():
        names.append(f"rho[{a},{b}]")
        vals.append(r)
    return names, np.array(vals)


def resample_clusters(data: CompetingRisksDataset, rng) -> CompetingRisksDataset:
    """Draw K clusters with replacement; each draw becomes a new cluster label."""
    K = data.num_clusters
    picks = rng.integers(1, K + 1, size=K)
    members = [np.flatnonzero(data.cluster == k) for k in range(1, K + 1)]
    idx = np.concatenate([members[k - 1] for k in picks])
    labels = np.concatenate([np.full(members[k - 1].size, i + 1) for i, k in enumerate(picks)])
    return CompetingRisksDataset(
        time=data.time[idx],
        status=data.status[idx],
        covariates=data.covariates[idx],
        covariate_names=data.covariate_names,
        cluster=labels,
        genes={g: v[idx] for g, v in data.genes.items()},
        num_causes=data.num_causes,
    )


@dataclass(frozen=True)
class IntervalEstimates:
    names: tuple
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    se: np.ndarray
    level: float
    replicates: int
    failures: int
    warnings: tuple = ()
    empse: np.ndarray | None = None
    rmse: np.ndarray | None = None

    def to_dict(self):
        out = {
            nm: {
                "estimate": float(self.estimate[i]),
                "lower": float(self.lower[i]),
                "upper": float(self.upper[i]),
                "se": float(self.se[i]),
            }
            for i, nm in enumerate(self.names)
        }
        for i, nm in enumerate(self.names):
            if self.empse is not None:
                out[nm]["empse"] = float(self.empse[i])
                out[nm]["rmse"] = float(self.rmse[i])
        return {"level": self.level, "replicates": self.replicates, "failures": self.failures,
                "warnings": list(self.warnings), "parameters": out}


def _boot_one(data, seed, options, covariates):
    from .frailty import fit_correlated_frailty

    rng = np.random.default_rng(seed)
    try:
        fit = fit_correlated_frailty(resample_clusters(data, rng), covariates, options)
    except (CorrFrailError, ValueError, ArithmeticError) as exc:
        return None, repr(exc)
    return parameter_vector(fit)[1], None


def standard_errors(fit, data, method="bootstrap", replicates=200, seed=0, level=0.95,
                    truth=None, options=None, n_jobs=1) -> IntervalEstimates:
    """Cluster-bootstrap percentile intervals for every beta, xi and rho.

    With ``truth`` (same order as :func:`parameter_vector`) EmpSE and RMSE of
    the bootstrap estimates about the truth are attached as well.  Fewer
    than 20 clusters triggers a :class:`FewClustersWarning`, which is also
    recorded on the result.
    """
    if method != "bootstrap":
        raise ValueError(f"unknown method {method!r}")
    from dataclasses import replace

    from .frailty import FrailtyOptions

    names, est = parameter_vector(fit)
    notes = []
    if data.num_clusters < MIN_CLUSTERS:
        msg = f"only {data.num_clusters} clusters; bootstrap intervals are unreliable below {MIN_CLUSTERS}"
        warnings.warn(msg, FewClustersWarning, stacklevel=2)
        notes.append(msg)
    opts = options or FrailtyOptions()
    opts = replace(opts, init=fit.params, bootstrap_replicates=0)
    seeds = np.random.SeedSequence(seed).generate_state(replicates)
    covs = fit.covariate_names
    if n_jobs == 1:
        results = [_boot_one(data, int(s), opts, covs) for s in seeds]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_boot_one)(data, int(s), opts, covs) for s in seeds)
    boots = np.array([r for r, _ in results if r is not None]).reshape(-1, est.size)
    failures = sum(r is None for r, _ in results)
    if boots.shape[0] == 0:
        raise CorrFrailError("every bootstrap replicate failed")
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(boots, [alpha, 1.0 - alpha], axis=0)
    se = boots.std(axis=0, ddof=1) if boots.shape[0] > 1 else np.zeros(est.size)
    empse = rmse = None
    if truth is not None:
        summ = empirical_summary(boots, truth)
        empse, rmse = summ.empse, summ.rmse
    return IntervalEstimates(
        names=tuple(names), estimate=est, lower=lower, upper=upper, se=se, level=level,
        replicates=boots.shape[0], failures=failures, warnings=tuple(notes), empse=empse, rmse=rmse,
    )


@dataclass(frozen=True)
class EmpiricalSummary:
    """Replicate summary: ``RMSE^2 = bias^2 + EmpSE^2 (R - 1) / R`` exactly."""

    truth: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    bias: np.ndarray
    empse: np.ndarray
    rmse: np.ndarray
    coverage: np.ndarray
    replicates: int


def empirical_summary(estimates, truth, lower=None, upper=None) -> EmpiricalSummary:
    """Bias, EmpSE (sd with ddof 1), RMSE and interval coverage over replicates.

    ``estimates`` is (R, P); NaN entries are ignored column-wise.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.broadcast_to(np.asarray(truth, dtype=float), est.shape[1:])
    R = np.sum(np.isfinite(est), axis=0)
    # working with deviations from one replicate keeps identical replicates at
    # exactly zero bias and spread
    ref = np.array([col[np.isfinite(col)][0] if np.isfinite(col).any() else 0.0 for col in est.T])
    dev_mean = np.nanmean(est - ref, axis=0)
    mean = ref + dev_mean
    bias = (ref - truth) + dev_mean
    with np.errstate(invalid="ignore", divide="ignore"):
        empse = np.where(R > 1, np.nanstd(est - ref, axis=0, ddof=1) if est.shape[0] > 1 else 0.0, 0.0)
    rmse = np.sqrt(np.nanmean((est - truth) ** 2, axis=0))
    if lower is not None and upper is not None:
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        covered = (lo <= truth) & (truth <= hi)
        ok = np.isfinite(lo) & np.isfinite(hi)
        with np.errstate(invalid="ignore"):
            coverage = np.where(ok.sum(axis=0) > 0, (covered & ok).sum(axis=0) / ok.sum(axis=0), np.nan)
    else:
        coverage = np.full(truth.shape, np.nan)
    return EmpiricalSummary(
        truth=np.array(truth), mean=mean, median=np.nanmedian(est, axis=0), bias=bias,
        empse=np.asarray(empse, dtype=float), rmse=rmse, coverage=coverage, replicates=int(est.shape[0]),
    )
