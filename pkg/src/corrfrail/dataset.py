"""Competing-risks data model, CSV ingestion and nonparametric summaries.

Status coding: 0 is censored, ``j = 1..J`` the cause of the first event.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import RowValidationError, SchemaError


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function.

    ``f(t) = values[i]`` for ``breakpoints[i] <= t < breakpoints[i+1]`` and
    ``initial`` before the first breakpoint.
    """

    breakpoints: np.ndarray
    values: np.ndarray
    initial: float = 0.0

    def __post_init__(self):
        x = _frozen(self.breakpoints)
        y = _frozen(self.values)
        if x.ndim != 1 or x.shape != y.shape:
            raise ValueError("breakpoints and values must be 1-d and the same length")
        if x.size > 1 and np.any(np.diff(x) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", x)
        object.__setattr__(self, "values", y)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        vals = np.concatenate([[self.initial], self.values])
        out = vals[idx + 1]
        return out if out.ndim else float(out)

    def increments(self):
        """Jump sizes at each breakpoint."""
        return np.diff(np.concatenate([[self.initial], self.values]))

    def to_dict(self):
        return {
            "breakpoints": self.breakpoints.tolist(),
            "values": self.values.tolist(),
            "initial": self.initial,
        }


@dataclass(frozen=True)
class SurvivalRecord:
    id: str
    time: float
    status: int
    covariates: tuple
    cluster: int | None = None


@dataclass(frozen=True)
class CompetingRisksDataset:
    """Immutable column-oriented competing-risks dataset.

    Parameters
    ----------
    time : array_like, shape (n,)
        Observed times, strictly positive.
    status : array_like of int, shape (n,)
        0 for censored, otherwise the cause ``1..num_causes``.
    covariates : array_like, shape (n, p), optional
    covariate_names : sequence of str, optional
    cluster : array_like of int, optional
        Cluster (biomarker level) labels forming the contiguous set ``1..K``.
    genes : mapping of str to array_like, optional
        Raw expression values aligned with the records.
    num_causes : int, optional
        Declared ``J``; defaults to the largest status present (at least 1).
    ids : sequence of str, optional
    """

    time: np.ndarray
    status: np.ndarray
    covariates: np.ndarray = None
    covariate_names: tuple = ()
    cluster: np.ndarray | None = None
    genes: Mapping[str, np.ndarray] = field(default_factory=dict)
    num_causes: int | None = None
    ids: tuple = ()

    def __post_init__(self):
        time = _frozen(self.time)
        status = _frozen(self.status, dtype=np.int64)
        n = time.size
        if time.ndim != 1 or status.shape != time.shape:
            raise ValueError("time and status must be 1-d arrays of equal length")
        if n and not np.all(np.isfinite(time)):
            raise ValueError("times must be finite")
        bad = np.flatnonzero(~(time > 0))
        if bad.size:
            raise RowValidationError(
                f"non-positive time in rows {(bad + 1).tolist()}", (bad + 1).tolist()
            )
        max_status = int(status.max()) if n else 0
        J = self.num_causes if self.num_causes is not None else max(max_status, 1)
        if J < 1:
            raise ValueError("num_causes must be >= 1")
        bad = np.flatnonzero((status < 0) | (status > J))
        if bad.size:
            raise RowValidationError(
                f"status outside 0..{J} in rows {(bad + 1).tolist()}", (bad + 1).tolist()
            )

        if self.covariates is None:
            X = np.zeros((n, 0))
        else:
            X = np.array(self.covariates, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
        if X.shape[0] != n:
            raise ValueError("covariate rows must match the number of records")
        X.setflags(write=False)
        names = tuple(self.covariate_names) or tuple(f"x{i + 1}" for i in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("covariate_names length must equal the covariate count")

        cluster = None
        if self.cluster is not None:
            cluster = _frozen(self.cluster, dtype=np.int64)
            if cluster.shape != time.shape:
                raise ValueError("cluster labels must align with records")
            labels = np.unique(cluster)
            if labels.size and not np.array_equal(labels, np.arange(1, labels.size + 1)):
                raise ValueError("cluster labels must form the contiguous set 1..K")

        genes = {}
        for name, vals in dict(self.genes).items():
            g = _frozen(vals)
            if g.shape != time.shape:
                raise ValueError(f"gene {name!r} has {g.size} values, expected {n}")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"gene {name!r} has missing or non-finite values")
            genes[name] = g

        ids = tuple(str(i) for i in self.ids) or tuple(str(i + 1) for i in range(n))
        if len(ids) != n:
            raise ValueError("ids must align with records")

        object.__setattr__(self, "time", time)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "cluster", cluster)
        object.__setattr__(self, "genes", genes)
        object.__setattr__(self, "num_causes", int(J))
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.time.size

    @property
    def n(self):
        return self.time.size

    @property
    def num_clusters(self):
        return 0 if self.cluster is None else int(self.cluster.max(initial=0))

    @property
    def records(self):
        out = []
        for i in range(self.n):
            out.append(
                SurvivalRecord(
                    id=self.ids[i],
                    time=float(self.time[i]),
                    status=int(self.status[i]),
                    covariates=tuple(float(v) for v in self.covariates[i]),
                    cluster=None if self.cluster is None else int(self.cluster[i]),
                )
            )
        return out

    def covariate_matrix(self, names=None):
        """Covariate columns by name (all columns when ``names`` is None)."""
        if names is None:
            return self.covariates
        idx = []
        for nm in names:
            if nm not in self.covariate_names:
                raise KeyError(f"unknown covariate {nm!r}")
            idx.append(self.covariate_names.index(nm))
        return self.covariates[:, idx]

    def replace(self, **changes):
        """Copy with some fields replaced (the dataset itself is immutable)."""
        kw = dict(
            time=self.time,
            status=self.status,
            covariates=self.covariates,
            covariate_names=self.covariate_names,
            cluster=self.cluster,
            genes=self.genes,
            num_causes=self.num_causes,
            ids=self.ids,
        )
        kw.update(changes)
        return CompetingRisksDataset(**kw)

    def subset(self, mask):
        """Rows selected by a boolean mask or index array; clusters are relabelled."""
        idx = np.arange(self.n)[mask]
        cluster = None
        if self.cluster is not None:
            _, cluster = np.unique(self.cluster[idx], return_inverse=True)
            cluster = cluster + 1
        return CompetingRisksDataset(
            time=self.time[idx],
            status=self.status[idx],
            covariates=self.covariates[idx],
            covariate_names=self.covariate_names,
            cluster=cluster,
            genes={k: v[idx] for k, v in self.genes.items()},
            num_causes=self.num_causes,
            ids=tuple(self.ids[i] for i in idx),
        )

    def with_covariates(self, extra, names):
        """Append covariate columns."""
        extra = np.asarray(extra, dtype=float).reshape(self.n, -1)
        return self.replace(
            covariates=np.hstack([self.covariates, extra]),
            covariate_names=self.covariate_names + tuple(names),
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`."""

    time_col: str
    status_col: str
    covariates: Sequence[str] = ()
    genes: Sequence[str] = ()
    cluster_col: str | None = None
    id_col: str | None = None
    num_causes: int | None = None


def _parse_float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(s)
    return v


def load_csv(path, schema: CsvSchema) -> CompetingRisksDataset:
    """Read a comma-separated, UTF-8 file with a header row.

    Raises
    ------
    SchemaError
        A mapped column is absent from the header.
    RowValidationError
        Rows with non-numeric required fields, non-positive times, status
        outside ``0..J`` or non-contiguous cluster labels.  ``rows`` lists the
        offending 1-based data row numbers.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [schema.time_col, schema.status_col, *schema.covariates, *schema.genes]
        if schema.cluster_col:
            wanted.append(schema.cluster_col)
        if schema.id_col:
            wanted.append(schema.id_col)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"missing columns: {', '.join(missing)}")
        rows = list(reader)

    n = len(rows)
    time = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    X = np.empty((n, len(schema.covariates)))
    G = np.empty((n, len(schema.genes)))
    cluster = np.empty(n, dtype=np.int64) if schema.cluster_col else None
    ids = []
    problems = {}
    for r, row in enumerate(rows, start=1):
        try:
            time[r - 1] = _parse_float(row[schema.time_col])
            s = float(row[schema.status_col])
            if s != int(s):
                raise ValueError(row[schema.status_col])
            status[r - 1] = int(s)
            for c, name in enumerate(schema.covariates):
                X[r - 1, c] = _parse_float(row[name])
            for c, name in enumerate(schema.genes):
                G[r - 1, c] = _parse_float(row[name])
            if cluster is not None:
                cluster[r - 1] = int(row[schema.cluster_col])
        except (TypeError, ValueError) as exc:
            problems[r] = f"non-numeric value ({exc})"
            continue
        if time[r - 1] <= 0:
            problems[r] = "time must be > 0"
        elif status[r - 1] < 0 or (schema.num_causes is not None and status[r - 1] > schema.num_causes):
            problems[r] = f"status {status[r - 1]} outside 0..{schema.num_causes}"
        ids.append(row[schema.id_col] if schema.id_col else str(r))
    if problems:
        detail = "; ".join(f"row {r}: {msg}" for r, msg in sorted(problems.items()))
        raise RowValidationError(f"invalid rows: {detail}", sorted(problems))

    try:
        return CompetingRisksDataset(
            time=time,
            status=status,
            covariates=X,
            covariate_names=tuple(schema.covariates),
            cluster=cluster,
            genes={name: G[:, c] for c, name in enumerate(schema.genes)},
            num_causes=schema.num_causes,
            ids=tuple(ids),
        )
    except ValueError as exc:
        if isinstance(exc, RowValidationError):
            raise
        raise RowValidationError(str(exc), []) from exc


def save_csv(data: CompetingRisksDataset, path, time_col="time", status_col="status",
             cluster_col="cluster", id_col=None):
    """Write ``data`` in the layout :func:`load_csv` reads.

    Floats are written with ``repr`` so a reload reproduces them bit-exactly.
    Returns the matching :class:`CsvSchema`.
    """
    header = []
    if id_col:
        header.append(id_col)
    header += [time_col, status_col, *data.covariate_names, *data.genes]
    if data.cluster is not None:
        header.append(cluster_col)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [data.ids[i]] if id_col else []
            row += [repr(float(data.time[i])), str(int(data.status[i]))]
            row += [repr(float(v)) for v in data.covariates[i]]
            row += [repr(float(g[i])) for g in data.genes.values()]
            if data.cluster is not None:
                row.append(str(int(data.cluster[i])))
            w.writerow(row)
    return CsvSchema(
        time_col=time_col,
        status_col=status_col,
        covariates=tuple(data.covariate_names),
        genes=tuple(data.genes),
        cluster_col=cluster_col if data.cluster is not None else None,
        id_col=id_col,
        num_causes=data.num_causes,
    )


def dummy_code(values, name, levels=None):
    """Indicator columns for a categorical covariate; the first level is the reference."""
    values = np.asarray(values)
    levels = list(np.unique(values)) if levels is None else list(levels)
    cols = np.column_stack([(values == lv).astype(float) for lv in levels[1:]]) \
        if len(levels) > 1 else np.zeros((values.size, 0))
    return cols, [f"{name}{lv}" for lv in levels[1:]]


def dichotomize(values, cutoff):
    """0 below ``cutoff`` and 1 at or above it."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("values must be non-empty")
    return (values >= cutoff).astype(np.int8)


def cutoff_grid(values, grid="percentile", points=99):
    """Candidate cutoffs for dichotomizing ``values``.

    ``grid="percentile"`` gives the 1st..99th empirical percentiles (linear
    interpolation between order statistics); ``grid="equal"`` gives 99
    interior points equally spaced over ``[min, max]``.
    """
    values = np.asarray(values, dtype=float)
    if np.unique(values).size < 2:
        raise ValueError("need at least two distinct values to form a partition")
    if grid == "percentile":
        q = np.linspace(0, 100, points + 2)[1:-1]
        return np.percentile(values, q, method="linear")
    if grid == "equal":
        lo, hi = values.min(), values.max()
        return lo + (hi - lo) * np.arange(1, points + 1) / (points + 1)
    raise ValueError(f"unknown grid {grid!r}")


def kaplan_meier(data: CompetingRisksDataset) -> StepFunction:
    """All-cause Kaplan-Meier survival, with breakpoints at event times."""
    times, at_risk, d = _event_table(data)
    dall = d.sum(axis=1)
    if _small_table(at_risk):
        S = np.array([float(v) for v in _exact_survival(at_risk, dall)[1:]])
    else:
        S = np.cumprod(1.0 - dall / at_risk)
    return StepFunction(times, S, initial=1.0)


def _small_table(at_risk):
    # rational evaluation is cheap while every denominator fits in a double's mantissa
    return at_risk.size > 0 and float(np.prod(at_risk)) < 2.0 ** 53


def _exact_survival(at_risk, dall):
    """``S(t_i-)`` for every event time plus the final value, as fractions."""
    out = [Fraction(1)]
    for n, e in zip(at_risk, dall):
        out.append(out[-1] * Fraction(int(n) - int(e), int(n)))
    return out


def _event_table(data):
    """Unique times with any event, risk-set sizes and per-cause counts."""
    if data.n == 0:
        raise ValueError("empty dataset")
    ev = data.status > 0
    times = np.unique(data.time[ev])
    sorted_t = np.sort(data.time)
    at_risk = data.n - np.searchsorted(sorted_t, times, side="left")
    pos = np.searchsorted(times, data.time[ev])
    d = np.zeros((times.size, data.num_causes))
    np.add.at(d, (pos, data.status[ev] - 1), 1.0)
    return times, at_risk.astype(float), d


def cumulative_incidence(data: CompetingRisksDataset, cause: int) -> StepFunction:
    """Aalen-Johansen cumulative incidence of ``cause``.

    ``CIF_j(t) = sum_{t_i <= t} S(t_i-) d_ij / n_i`` with ``S`` the all-cause
    Kaplan-Meier estimate and ``n_i`` the number at risk.
    """
    if not 1 <= cause <= data.num_causes:
        raise ValueError(f"cause must be in 1..{data.num_causes}")
    times, at_risk, d = _event_table(data)
    dall = d.sum(axis=1)
    if _small_table(at_risk):
        # exact rationals, rounded once: hand-checkable tables match to the last bit
        S_minus = _exact_survival(at_risk, dall)
        acc, cif = Fraction(0), []
        for i, n in enumerate(at_risk):
            acc += S_minus[i] * Fraction(int(d[i, cause - 1]), int(n))
            cif.append(float(acc))
        return StepFunction(times, np.array(cif), initial=0.0)
    S = np.cumprod(1.0 - dall / at_risk)
    S_minus = np.concatenate([[1.0], S[:-1]])
    cif = np.cumsum(S_minus * d[:, cause - 1] / at_risk)
    return StepFunction(times, cif, initial=0.0)


@dataclass(frozen=True)
class ClusterSummary:
    """Per-cluster event counts and accumulated hazard loads.

    ``loads[j-1] = sum_i Lambda_j0(t_i) exp(beta_j' x_i)`` over subjects of
    the cluster, i.e. the cause-``j`` cumulative hazard at unit frailty.
    """

    cluster: int
    events: np.ndarray
    size: int
    loads: np.ndarray


def subject_loads(data: CompetingRisksDataset, fits) -> np.ndarray:
    """(n, J) matrix of ``Lambda_j0(t_i) exp(beta_j' x_i)``.

    ``fits`` is a sequence of objects with ``beta``, ``baseline`` and
    ``covariate_names`` attributes (one per cause, in cause order).
    """
    if len(fits) != data.num_causes:
        raise ValueError("need one fit per cause")
    out = np.empty((data.n, data.num_causes))
    for j, fit in enumerate(fits):
        X = data.covariate_matrix(fit.covariate_names) if fit.covariate_names else np.zeros((data.n, 0))
        out[:, j] = fit.baseline(data.time) * np.exp(X @ np.asarray(fit.beta, dtype=float))
    return out


def cluster_summaries(data: CompetingRisksDataset, fits) -> list[ClusterSummary]:
    if data.cluster is None:
        raise ValueError("dataset has no cluster labels")
    loads = subject_loads(data, fits)
    K, J = data.num_clusters, data.num_causes
    d = np.zeros((K, J))
    ev = data.status > 0
    np.add.at(d, (data.cluster[ev] - 1, data.status[ev] - 1), 1.0)
    H = np.zeros((K, J))
    np.add.at(H, data.cluster - 1, loads)
    sizes = np.bincount(data.cluster - 1, minlength=K)
    return [
        ClusterSummary(cluster=k + 1, events=d[k].astype(int), size=int(sizes[k]), loads=H[k])
        for k in range(K)
    ]
