"""Cause-specific Cox proportional hazards.

Breslow handling of ties, Newton-Raphson with step halving, Breslow baseline
and Wald inference.  Events of other causes are treated as censored.
Per-subject multiplicative offsets enter the risk score, which is how the
frailty EM reuses this module.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .dataset import CompetingRisksDataset, StepFunction
from .errors import (
    ConvergenceError,
    MonotoneLikelihoodError,
    MonotoneLikelihoodWarning,
    SingularInformationError,
)


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    max_halvings: int = 20
    offsets: np.ndarray | None = None
    beta_guard: float = 15.0
    init: np.ndarray | None = None

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.max_iterations < 1 or self.beta_guard <= 0:
            raise ValueError("tolerances and limits must be positive")


@dataclass(frozen=True)
class CoxFit:
    cause: int
    covariate_names: tuple
    beta: np.ndarray
    covariance: np.ndarray
    standard_errors: np.ndarray
    wald_p_values: np.ndarray
    log_partial_likelihood: float
    baseline: StepFunction
    converged: bool = True
    iterations: int = 0
    monotone_likelihood: bool = False
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "cause": self.cause,
            "covariates": list(self.covariate_names),
            "beta": self.beta.tolist(),
            "standard_errors": self.standard_errors.tolist(),
            "wald_p_values": self.wald_p_values.tolist(),
            "log_partial_likelihood": self.log_partial_likelihood,
            "baseline": self.baseline.to_dict(),
            "converged": self.converged,
            "iterations": self.iterations,
            "monotone_likelihood": self.monotone_likelihood,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


class _RiskSets:
    """Sort order and tie structure of one (time, event) pair, reusable across fits."""

    def __init__(self, time, event):
        self.order = np.argsort(time, kind="stable")
        t = time[self.order]
        e = event[self.order]
        self.event_times = np.unique(t[e])
        # first sorted position of each event time: risk set is everything from there on
        self.first = np.searchsorted(t, self.event_times, side="left")
        self.d = np.bincount(np.searchsorted(self.event_times, t[e]), minlength=self.event_times.size)
        # number of event times <= each sorted subject's time
        self.n_before = np.searchsorted(self.event_times, t, side="right")
        self.n = time.size

    def suffix(self, a):
        """Sum of ``a`` (sorted order) over each event time's risk set."""
        c = np.cumsum(a[::-1], axis=0)[::-1]
        return c[self.first]

    def cumhaz_at_subjects(self, jumps):
        """Cumulated ``jumps`` up to each sorted subject's own time."""
        c = np.concatenate([[0.0], np.cumsum(jumps)])
        return c[self.n_before]


def _loglik_arrays(beta, X, event, offsets, rs, need_hessian=True):
    eta = X @ beta
    log_w = eta + np.log(offsets)
    shift = log_w.max() if log_w.size else 0.0
    w = np.exp(log_w - shift)
    ws = w[rs.order]
    Xs = X[rs.order]
    S0 = rs.suffix(ws)
    value = log_w[event].sum() - np.dot(rs.d, np.log(S0) + shift)
    S1 = rs.suffix(ws[:, None] * Xs)
    m = S1 / S0[:, None]
    grad = X[event].sum(axis=0) - rs.d @ m
    if not need_hessian:
        return value, grad, None
    # sum_u d_u S2_u / S0_u == X' diag(w_i * Lambda(t_i)) X
    lam = rs.cumhaz_at_subjects(rs.d / S0)
    hess = (m.T * rs.d) @ m - (Xs.T * (ws * lam)) @ Xs
    return value, grad, hess


def _event_mask(data, cause):
    if not 1 <= cause <= data.num_causes:
        raise ValueError(f"cause must be in 1..{data.num_causes}")
    return data.status == cause


def _check_inputs(X, offsets):
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite covariate values")
    if offsets is not None and (np.any(~np.isfinite(offsets)) or np.any(offsets <= 0)):
        raise ValueError("offsets must be finite and positive")


def partial_loglik(beta, data: CompetingRisksDataset, cause, offsets=None, covariates=None):
    """Log partial likelihood of ``cause`` with its gradient and Hessian.

    Returns
    -------
    value : float
    gradient : ndarray, shape (p,)
    hessian : ndarray, shape (p, p)
    """
    X = data.covariate_matrix(covariates)
    event = _event_mask(data, cause)
    offsets = np.ones(data.n) if offsets is None else np.asarray(offsets, dtype=float)
    _check_inputs(X, offsets)
    rs = _RiskSets(data.time, event)
    return _loglik_arrays(np.asarray(beta, dtype=float), X, event, offsets, rs)


def _collinear_columns(X, names):
    Xc = X - X.mean(axis=0)
    if Xc.shape[1] == 0:
        return []
    _, R, piv = linalg.qr(Xc, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(Xc.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    bad = [names[piv[i]] for i in range(diag.size) if diag[i] <= max(tol, 1e-10 * diag[0])]
    bad += [names[piv[i]] for i in range(diag.size, Xc.shape[1])]
    return bad or list(names)


def breslow_arrays(beta, X, time, event, offsets=None):
    """Breslow cumulative baseline hazard as a step function."""
    offsets = np.ones(time.size) if offsets is None else np.asarray(offsets, dtype=float)
    rs = _RiskSets(time, event)
    w = offsets * np.exp(X @ np.asarray(beta, dtype=float))
    S0 = rs.suffix(w[rs.order])
    return StepFunction(rs.event_times, np.cumsum(rs.d / S0), initial=0.0)


def breslow_baseline(fit: CoxFit, data: CompetingRisksDataset, offsets=None) -> StepFunction:
    """``Lambda_0(t) = sum_{t_i <= t} d_i / sum_{risk set} offset * exp(beta' x)``."""
    X = data.covariate_matrix(fit.covariate_names) if fit.covariate_names else np.zeros((data.n, 0))
    return breslow_arrays(fit.beta, X, data.time, _event_mask(data, fit.cause), offsets)


def fit_cox_arrays(X, time, event, options: FitOptions = FitOptions(), names=None, cause=1):
    """Newton-Raphson fit on raw arrays; see :func:`fit_cox`."""
    X = np.asarray(X, dtype=float).reshape(time.size, -1)
    event = np.asarray(event, dtype=bool)
    p = X.shape[1]
    names = tuple(names) if names is not None else tuple(f"x{i + 1}" for i in range(p))
    offsets = np.ones(time.size) if options.offsets is None else np.asarray(options.offsets, dtype=float)
    _check_inputs(X, offsets)
    if not event.any():
        raise ValueError(f"no events of cause {cause}")

    rs = _RiskSets(time, event)
    # centring leaves the partial likelihood unchanged and keeps exp() tame
    Xc = X - X.mean(axis=0) if p else X
    beta = np.zeros(p) if options.init is None else np.array(options.init, dtype=float)
    value, grad, hess = _loglik_arrays(beta, Xc, event, offsets, rs)
    trace = [(0, float(value), float(np.abs(grad).max(initial=0.0)))]
    converged = p == 0 or np.abs(grad).max() < options.gradient_tolerance
    monotone = False
    it = 0
    while not converged and it < options.max_iterations:
        it += 1
        try:
            step = linalg.solve(-hess, grad, assume_a="sym")
        except (linalg.LinAlgError, ValueError):
            step = None
        if step is None or not np.all(np.isfinite(step)):
            raise SingularInformationError(
                "singular information matrix; collinear columns: "
                + ", ".join(_collinear_columns(X, names)),
                _collinear_columns(X, names),
            )
        scale = 1.0
        for _ in range(options.max_halvings + 1):
            cand = beta + scale * step
            v, g, h = _loglik_arrays(cand, Xc, event, offsets, rs)
            if np.isfinite(v) and v >= value - 1e-12 * (1 + abs(value)):
                break
            scale *= 0.5
        else:
            raise ConvergenceError("step halving failed to increase the partial likelihood", trace)
        stalled = abs(v - value) <= 1e-14 * (1 + abs(value)) and np.abs(scale * step).max() < 1e-10
        beta, value, grad, hess = cand, v, g, h
        trace.append((it, float(value), float(np.abs(grad).max())))
        if np.abs(beta).max() > options.beta_guard:
            monotone = True
            warnings.warn(
                f"coefficient exceeded |beta| > {options.beta_guard}: monotone likelihood "
                "(separation) suspected",
                MonotoneLikelihoodWarning,
                stacklevel=2,
            )
            break
        converged = np.abs(grad).max() < options.gradient_tolerance or stalled
    if not converged and not monotone:
        raise ConvergenceError(f"Newton-Raphson did not converge in {it} iterations", trace)

    if p:
        try:
            cov = linalg.inv(-hess)
        except linalg.LinAlgError as exc:
            cols = _collinear_columns(X, names)
            raise SingularInformationError(
                "singular information matrix; collinear columns: " + ", ".join(cols), cols
            ) from exc
        cov = 0.5 * (cov + cov.T)
        diag = np.diag(cov)
        if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
            cols = _collinear_columns(X, names)
            raise SingularInformationError(
                "information matrix is not positive definite; collinear columns: " + ", ".join(cols),
                cols,
            )
        se = np.sqrt(diag)
        pvals = 2.0 * norm.sf(np.abs(beta / se))
    else:
        cov = np.zeros((0, 0))
        se = pvals = np.zeros(0)

    # baseline uses the uncentred covariates
    baseline = breslow_arrays(beta, X, time, event, offsets)
    return CoxFit(
        cause=cause,
        covariate_names=names,
        beta=beta,
        covariance=cov,
        standard_errors=se,
        wald_p_values=pvals,
        log_partial_likelihood=float(value),
        baseline=baseline,
        converged=bool(converged),
        iterations=it,
        monotone_likelihood=monotone,
        trace=trace,
    )


def require_finite_fit(fit: CoxFit, X) -> CoxFit:
    """Return ``fit`` unless separation made its hazard loads undefined.

    A diverged coefficient can drive Breslow jumps to 0 while ``exp(x'beta)``
    overflows; frailty loads ``Lambda_0(t) exp(x'beta)`` are then ``0 * inf``.
    """
    jumps = fit.baseline.increments()
    with np.errstate(over="ignore"):
        risk = np.exp(np.asarray(X, dtype=float) @ fit.beta) if fit.beta.size else np.ones(1)
    if not (np.all(jumps > 0) and np.all(np.isfinite(jumps)) and np.all(np.isfinite(risk))):
        raise MonotoneLikelihoodError(
            f"cause {fit.cause}: monotone likelihood (separation) left the baseline hazard "
            f"undefined; coefficients {fit.beta.tolist()}"
        )
    return fit


def fit_cox(data: CompetingRisksDataset, cause=1, covariates=None, options: FitOptions = FitOptions()) -> CoxFit:
    """Fit the cause-specific Cox model for ``cause``.

    Newton-Raphson from ``beta = 0`` with step halving until the gradient
    max-norm falls below ``options.gradient_tolerance``.  If a coefficient
    leaves ``[-beta_guard, beta_guard]`` iteration stops, a
    :class:`MonotoneLikelihoodWarning` is issued and the returned fit has
    ``monotone_likelihood=True``.

    Raises
    ------
    ValueError
        No events of ``cause``.
    SingularInformationError
        Information matrix singular (``columns`` names the culprits).
    ConvergenceError
        Iteration limit reached; ``trace`` holds ``(iter, loglik, |grad|)``.
    """
    X = data.covariate_matrix(covariates)
    names = data.covariate_names if covariates is None else tuple(covariates)
    event = _event_mask(data, cause)
    return fit_cox_arrays(X, data.time, event, options, names=names, cause=cause)


def wald_pvalue(fit: CoxFit, index) -> float:
    """Two-sided Wald p-value ``2 (1 - Phi(|beta / se|))``."""
    if isinstance(index, str):
        index = fit.covariate_names.index(index)
    se = fit.standard_errors[index]
    if not se > 0:
        raise ZeroDivisionError("standard error is zero")
    return float(2.0 * norm.sf(abs(fit.beta[index] / se)))
