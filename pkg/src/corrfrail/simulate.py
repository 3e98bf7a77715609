"""Clustered competing-risks data under additive correlated gamma frailty.

Latent cause-specific times follow Weibull-baseline proportional hazards
``W_kj (t / scale_j)^shape_j exp(beta_j' x)`` and are drawn by inverse
transform; exponential censoring competes with them and the observed record
keeps the earliest time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataset import CompetingRisksDataset

COVARIATES = ("age", "tstage", "nstage")


@dataclass(frozen=True)
class SimConfig:
    """Simulation scenario.

    ``censoring_rate = 0`` disables censoring.  Covariates are age ~
    Uniform(10, 70) and t-stage, n-stage ~ Bernoulli(0.5).
    """

    K: int = 3
    n_per_cluster: int = 20
    nu0: float = 1.5
    nu: tuple = (2.0, 2.5, 3.0)
    weibull_scale: tuple = (4.8, 5.2, 5.5)
    weibull_shape: tuple = (1.01, 1.02, 1.04)
    censoring_rate: float = 0.5
    beta: tuple = ((-0.06, 0.1, 0.5), (-0.05, 0.2, 0.2), (-0.03, 0.3, 0.3))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nu", tuple(float(v) for v in self.nu))
        object.__setattr__(self, "weibull_scale", tuple(float(v) for v in self.weibull_scale))
        object.__setattr__(self, "weibull_shape", tuple(float(v) for v in self.weibull_shape))
        object.__setattr__(self, "beta", tuple(tuple(float(b) for b in row) for row in self.beta))
        J = len(self.nu)
        if not (len(self.weibull_scale) == len(self.weibull_shape) == len(self.beta) == J):
            raise ValueError("nu, weibull_scale, weibull_shape and beta need one entry per cause")
        if any(len(row) != len(COVARIATES) for row in self.beta):
            raise ValueError(f"each beta row needs {len(COVARIATES)} coefficients")
        if self.K < 1 or self.n_per_cluster < 1:
            raise ValueError("K and n_per_cluster must be positive")
        if self.nu0 < 0 or min(self.nu) <= 0 or min(self.weibull_scale) <= 0 or min(self.weibull_shape) <= 0:
            raise ValueError("frailty shapes and Weibull parameters must be positive")
        if self.censoring_rate < 0:
            raise ValueError("censoring_rate must be >= 0")

    @property
    def J(self):
        return len(self.nu)

    def replace(self, **kw):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return SimConfig(**d)

    def to_dict(self):
        return asdict(self)


def sixty_subject_preset(seed=0):
    """Three biomarker levels of 20 subjects each (60 in total), three causes."""
    return SimConfig(seed=seed)


def consistency_preset(seed=0):
    """60 clusters of 20 subjects with the default generating parameters."""
    return SimConfig(K=60, seed=seed)


PRESETS = {"paper-sec3": sixty_subject_preset, "consistency": consistency_preset}


def load_scenario(path):
    """Read a ``key = value`` scenario file into a :class:`SimConfig`.

    Tuples are comma-separated; ``beta`` rows are separated by ``;``.
    Lines starting with ``#`` are ignored.
    """
    kw = {}
    names = {f.name for f in fields(SimConfig)}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in names:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            if key in ("K", "n_per_cluster", "seed"):
                kw[key] = int(val)
            elif key in ("nu0", "censoring_rate"):
                kw[key] = float(val)
            elif key == "beta":
                kw[key] = tuple(tuple(float(x) for x in row.split(",")) for row in val.split(";"))
            else:
                kw[key] = tuple(float(x) for x in val.split(","))
    return SimConfig(**kw)


def save_scenario(config: SimConfig, path):
    def fmt(v):
        return ", ".join(repr(x) for x in v)

    lines = [
        f"K = {config.K}",
        f"n_per_cluster = {config.n_per_cluster}",
        f"nu0 = {config.nu0!r}",
        f"nu = {fmt(config.nu)}",
        f"weibull_scale = {fmt(config.weibull_scale)}",
        f"weibull_shape = {fmt(config.weibull_shape)}",
        f"censoring_rate = {config.censoring_rate!r}",
        "beta = " + "; ".join(fmt(row) for row in config.beta),
        f"seed = {config.seed}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def draw_frailties(config: SimConfig, rng) -> np.ndarray:
    """K x J matrix ``W_kj = (Z_k0 + Z_kj) / (nu0 + nu_j)``."""
    nu = np.asarray(config.nu)
    z0 = rng.gamma(config.nu0, 1.0, size=config.K) if config.nu0 > 0 else np.zeros(config.K)
    z = rng.gamma(nu, 1.0, size=(config.K, config.J))
    return (z0[:, None] + z) / (config.nu0 + nu)


def simulate_dataset(config: SimConfig, rng=None, frailties=None) -> CompetingRisksDataset:
    """One clustered competing-risks dataset.

    ``frailties`` (K x J) overrides the gamma draws, e.g. all ones for a
    frailty-free scenario.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    K, J, m = config.K, config.J, config.n_per_cluster
    n = K * m
    W = draw_frailties(config, rng) if frailties is None else np.broadcast_to(frailties, (K, J))
    cluster = np.repeat(np.arange(1, K + 1), m)
    X = np.column_stack([
        rng.uniform(10.0, 70.0, size=n),
        rng.integers(0, 2, size=n).astype(float),
        rng.integers(0, 2, size=n).astype(float),
    ])
    beta = np.asarray(config.beta)
    scale = np.asarray(config.weibull_scale)
    shape = np.asarray(config.weibull_shape)
    E = rng.exponential(1.0, size=(n, J))
    # Lambda_j(t) = W (t/scale)^shape exp(x'beta) = E  =>  t = scale (E / (W exp(x'beta)))^(1/shape)
    rate = W[cluster - 1] * np.exp(X @ beta.T)
    latent = scale * (E / rate) ** (1.0 / shape)
    if config.censoring_rate > 0:
        cens = rng.exponential(1.0 / config.censoring_rate, size=n)
    else:
        cens = np.full(n, np.inf)
    allt = np.column_stack([latent, cens])
    first = allt.argmin(axis=1)
    time = allt[np.arange(n), first]
    status = np.where(first == J, 0, first + 1)
    return CompetingRisksDataset(
        time=time,
        status=status,
        covariates=X,
        covariate_names=COVARIATES,
        cluster=cluster,
        num_causes=J,
    )


def planted_cutoff_dataset(n, rng, percentile=60.0, hazard_ratio=2.0, censoring_rate=0.2,
                           gene="gene", num_causes=1, extra_genes=None):
    """Exponential survival with a step effect of a synthetic gene.

    Subjects whose N(0, 1) expression lies at or above the population
    ``percentile`` have cause-1 hazard multiplied by ``hazard_ratio``.  With
    ``num_causes = 2`` an effect-free competing cause of rate 0.5 is added.
    ``extra_genes`` maps further gene names to ``(percentile, hazard_ratio)``
    effects acting multiplicatively on the same hazard.
    """
    from scipy.stats import norm

    genes = {gene: (percentile, hazard_ratio)}
    genes.update(extra_genes or {})
    expr = {}
    rate = np.ones(n)
    for name, (pct, hr) in genes.items():
        y = rng.standard_normal(n)
        expr[name] = y
        rate = rate * np.where(y >= norm.ppf(pct / 100.0), hr, 1.0)
    t1 = rng.exponential(1.0 / rate)
    times = [t1]
    if num_causes == 2:
        times.append(rng.exponential(2.0, size=n))
    cens = rng.exponential(1.0 / censoring_rate, size=n) if censoring_rate > 0 else np.full(n, np.inf)
    allt = np.column_stack(times + [cens])
    first = allt.argmin(axis=1)
    status = np.where(first == len(times), 0, first + 1)
    return CompetingRisksDataset(
        time=allt[np.arange(n), first],
        status=status,
        genes=expr,
        num_causes=num_causes,
    )


def config_json(config: SimConfig):
    return json.dumps(config.to_dict(), sort_keys=True)


# ------------------------------------------------------------ replicate study

ESTIMATORS = ("correlated", "independent")


def true_parameters(config: SimConfig):
    """``(names, values)`` of the generating betas, variances and correlations."""
    from .frailty import FrailtyParams, frailty_moments

    names, vals = [], []
    for j, row in enumerate(config.beta, start=1):
        for nm, b in zip(COVARIATES, row):
            names.append(f"beta[{j},{nm}]")
            vals.append(b)
    mom = frailty_moments(FrailtyParams(config.nu0, config.nu))
    for j, xi in enumerate(mom.variances, start=1):
        names.append(f"xi[{j}]")
        vals.append(float(xi))
    for (a, b), r in mom.pairs().items():
        names.append(f"rho[{a},{b}]")
        vals.append(r)
    return names, np.array(vals)


def _estimate(data, estimator, names):
    """Estimates aligned with ``names`` (NaN where the estimator has no such parameter)."""
    out = dict.fromkeys(names, np.nan)
    if estimator == "correlated":
        from .frailty import fit_correlated_frailty
        from .inference import parameter_vector

        nm, vals = parameter_vector(fit_correlated_frailty(data, COVARIATES))
        out.update(zip(nm, vals))
    elif estimator == "independent":
        from .shared_frailty import fit_independent_frailty

        for j, fit in enumerate(fit_independent_frailty(data, COVARIATES), start=1):
            for cn, b in zip(fit.covariate_names, fit.beta):
                out[f"beta[{j},{cn}]"] = float(b)
            out[f"xi[{j}]"] = fit.variance
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return np.array([out[n] for n in names])


def _one_replicate(config, r, seed_seq, estimators, names):
    import warnings

    from .errors import CorrFrailError

    rng = np.random.default_rng(seed_seq)
    data = simulate_dataset(config, rng)
    rows, fails = {}, []
    for est in estimators:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rows[est] = _estimate(data, est, names)
        except (CorrFrailError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            fails.append((r, est, f"{type(exc).__name__}: {exc}"))
            rows[est] = np.full(len(names), np.nan)
    return rows, fails


@dataclass(frozen=True)
class ReplicateSummary:
    """One row per (estimator, parameter)."""

    estimator: str
    parameter: str
    truth: float
    mean: float
    median: float
    bias: float
    empse: float
    rmse: float
    coverage: float
    replicates: int
    failures: int


@dataclass(frozen=True)
class ReplicateStudy:
    config: SimConfig
    seed: int
    R: int
    names: tuple
    truth: np.ndarray
    estimates: dict
    failures: tuple
    summaries: tuple

    def table(self, kind):
        """Rows for ``"coefficients"``, ``"variances"`` or ``"correlations"``."""
        prefix = {"coefficients": "beta", "variances": "xi", "correlations": "rho"}[kind]
        return [s for s in self.summaries if s.parameter.startswith(prefix + "[") and np.isfinite(s.mean)]

    def to_rows(self):
        return [asdict(s) for s in self.summaries]

    def write(self, directory):
        """``summary.csv``, ``estimates.csv`` and ``summary.json`` under ``directory``."""
        import csv
        import os

        os.makedirs(directory, exist_ok=True)
        cols = [f.name for f in fields(ReplicateSummary)]
        paths = []
        p = os.path.join(directory, "summary.csv")
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for s in self.summaries:
                w.writerow([_fmt(getattr(s, c)) for c in cols])
        paths.append(p)
        p = os.path.join(directory, "estimates.csv")
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimator", "replicate"] + list(self.names))
            for est, arr in self.estimates.items():
                for r, row in enumerate(arr):
                    w.writerow([est, r] + [_fmt(v) for v in row])
        paths.append(p)
        p = os.path.join(directory, "summary.json")
        doc = {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "replicates": self.R,
            "failures": [list(f) for f in self.failures],
            "summary": [{k: _json_num(v) for k, v in r.items()} for r in self.to_rows()],
        }
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(p)
        return paths


def _fmt(v):
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return v


def _json_num(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def summarize(estimates, truth, names, estimator, failures=0, lower=None, upper=None):
    from .inference import empirical_summary

    summ = empirical_summary(estimates, truth, lower, upper)
    R = np.sum(np.isfinite(np.asarray(estimates, dtype=float)), axis=0)
    return [
        ReplicateSummary(
            estimator=estimator, parameter=nm, truth=float(truth[i]), mean=float(summ.mean[i]),
            median=float(summ.median[i]), bias=float(summ.bias[i]), empse=float(summ.empse[i]),
            rmse=float(summ.rmse[i]), coverage=float(summ.coverage[i]), replicates=int(R[i]),
            failures=failures,
        )
        for i, nm in enumerate(names)
    ]


def replicate_study(config: SimConfig, R, estimators=ESTIMATORS, seed=None, n_jobs=1) -> ReplicateStudy:
    """Simulate and fit ``R`` times; summarise truth against estimate.

    Replicate ``r`` draws from child ``r`` of ``SeedSequence(seed)`` (default
    ``config.seed``), so results do not depend on ``n_jobs``.  Failed fits are
    listed in ``failures`` and excluded from that estimator's summary.
    """
    import warnings

    if R < 2:
        raise ValueError("need R >= 2 replicates")
    estimators = tuple(estimators)
    for e in estimators:
        if e not in ESTIMATORS:
            raise ValueError(f"unknown estimator {e!r}")
    seed = config.seed if seed is None else seed
    names, truth = true_parameters(config)
    children = np.random.SeedSequence(seed).spawn(R)
    if n_jobs == 1:
        results = [_one_replicate(config, r, c, estimators, names) for r, c in enumerate(children)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_one_replicate)(config, r, c, estimators, names) for r, c in enumerate(children)
        )
    estimates = {e: np.array([res[0][e] for res in results]) for e in estimators}
    failures = tuple(f for res in results for f in res[1])
    summaries = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for e in estimators:
            nfail = sum(1 for f in failures if f[1] == e)
            summaries += summarize(estimates[e], truth, names, e, nfail)
    return ReplicateStudy(
        config=config, seed=seed, R=R, names=tuple(names), truth=truth,
        estimates=estimates, failures=failures, summaries=tuple(summaries),
    )
