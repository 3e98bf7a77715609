"""Single-frailty proportional hazards: shared gamma and log-normal frailty.

The gamma path is EM with the conjugate E-step
``E[W_k | data] = (nu + d_k) / (nu + H_k)`` for ``W_k ~ Gamma(nu, nu)``.
The log-normal path ("gaussian" frailty, ``log W_k ~ N(0, theta)``) uses the
penalized partial likelihood with a Laplace approximation to the integrated
partial likelihood, maximised over ``theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.stats import chi2

from .coxph import FitOptions, _loglik_arrays, _RiskSets, fit_cox_arrays, require_finite_fit
from .errors import ConvergenceError
from .frailty import NU_LOWER, NU_UPPER, _log_rising

VARIANCE_FLOOR = 1e-8
LOGNORMAL_MAX_VARIANCE = 50.0


@dataclass(frozen=True)
class SharedFrailtyFit:
    cause: int
    distribution: str
    cox: object
    variance: float
    posterior_means: np.ndarray
    loglik: float
    loglik_no_frailty: float
    iterations: int
    converged: bool
    loglik_trace: tuple = ()

    @property
    def beta(self):
        return self.cox.beta

    @property
    def baseline(self):
        return self.cox.baseline

    @property
    def covariate_names(self):
        return self.cox.covariate_names

    @property
    def likelihood_ratio(self):
        return max(0.0, 2.0 * (self.loglik - self.loglik_no_frailty))

    @property
    def variance_pvalue(self):
        """Boundary likelihood-ratio test of zero variance (50:50 chi-square mixture)."""
        return float(0.5 * chi2.sf(self.likelihood_ratio, 1)) if self.likelihood_ratio > 0 else 1.0

    def to_dict(self):
        return {
            "cause": self.cause,
            "distribution": self.distribution,
            "covariates": list(self.covariate_names),
            "beta": self.beta.tolist(),
            "frailty_variance": self.variance,
            "variance_pvalue": self.variance_pvalue,
            "loglik": self.loglik,
            "loglik_no_frailty": self.loglik_no_frailty,
            "iterations": self.iterations,
            "converged": self.converged,
            "em_trace": list(self.loglik_trace),
        }


def _groups(data, grouping):
    if grouping is None:
        if data.cluster is None:
            raise ValueError("dataset has no cluster labels; pass grouping")
        g = data.cluster - 1
    elif isinstance(grouping, str) and grouping == "subject":
        g = np.arange(data.n)
    else:
        _, g = np.unique(np.asarray(grouping), return_inverse=True)
    return g, int(g.max()) + 1


def _full_loglik_parts(beta, baseline, X, time, event):
    """Breslow point-mass event terms and per-subject cumulative hazards."""
    bp = baseline.breakpoints
    jumps = baseline.increments()
    eta = X @ beta
    ev_terms = float(np.log(jumps[np.searchsorted(bp, time[event])]).sum() + eta[event].sum())
    return ev_terms, baseline(time) * np.exp(eta)


def _gamma_logF(nu, d, H):
    """``log E[W^d exp(-W H)]`` for ``W ~ Gamma(nu, nu)`` per group (stable for large nu)."""
    T = _log_rising(nu, int(d.max(initial=0)))
    return T[d] - d * math.log(nu) - (nu + d) * np.log1p(H / nu)


def _best_nu(d, H, start):
    lo, hi = math.log(NU_LOWER), math.log(NU_UPPER)
    res = optimize.minimize_scalar(lambda x: -_gamma_logF(math.exp(x), d, H).sum(),
                                   bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10, "maxiter": 500})
    cands = [res.x, min(max(math.log(start), lo), hi), hi]
    vals = [-_gamma_logF(math.exp(x), d, H).sum() for x in cands]
    return math.exp(cands[int(np.argmin(vals))])


def _fit_gamma(X, time, event, g, K, names, cause, tol, max_iter):
    if not event.any():
        raise ValueError(f"no events of cause {cause}")
    d = np.bincount(g[event], minlength=K)
    fit = require_finite_fit(fit_cox_arrays(X, time, event, FitOptions(), names=names, cause=cause), X)
    ev, load = _full_loglik_parts(fit.beta, fit.baseline, X, time, event)
    ll_none = ev - load.sum()
    H = np.bincount(g, weights=load, minlength=K)
    nu = _best_nu(d, H, 1.0)
    ll = ev + _gamma_logF(nu, d, H).sum()
    trace = [ll]
    for it in range(1, max_iter + 1):
        Ew = (nu + d) / (nu + H)
        fit = require_finite_fit(
            fit_cox_arrays(X, time, event, FitOptions(offsets=Ew[g], init=fit.beta), names=names, cause=cause), X
        )
        ev, load = _full_loglik_parts(fit.beta, fit.baseline, X, time, event)
        H = np.bincount(g, weights=load, minlength=K)
        nu = _best_nu(d, H, nu)
        ll_new = ev + _gamma_logF(nu, d, H).sum()
        trace.append(ll_new)
        if abs(ll_new - ll) < tol:
            ll = ll_new
            break
        ll = ll_new
    else:
        raise ConvergenceError(f"gamma frailty EM did not converge in {max_iter} iterations", trace)
    return SharedFrailtyFit(
        cause=cause,
        distribution="gamma",
        cox=fit,
        variance=1.0 / nu,
        posterior_means=(nu + d) / (nu + H),
        loglik=ll,
        loglik_no_frailty=ll_none,
        iterations=it,
        converged=True,
        loglik_trace=tuple(trace),
    )


def _ppl_fit(X, time, event, g, K, theta, rs, init, max_iter=50):
    """Maximise ``l(beta, b) - b'b / (2 theta)``; returns (ppl, coef, info_bb)."""
    p = X.shape[1]
    Z = np.zeros((time.size, K))
    Z[np.arange(time.size), g] = 1.0
    D = np.hstack([X, Z])
    coef = init.copy()
    ones = np.ones(time.size)

    def evaluate(c):
        v, gr, he = _loglik_arrays(c, D, event, ones, rs)
        b = c[p:]
        v = v - b @ b / (2 * theta)
        gr = gr.copy()
        gr[p:] -= b / theta
        he = he.copy()
        he[p:, p:] -= np.eye(K) / theta
        return v, gr, he

    v, gr, he = evaluate(coef)
    for _ in range(max_iter):
        step = linalg.solve(-he, gr, assume_a="sym")
        s = 1.0
        for _ in range(30):
            cand = coef + s * step
            vc, gc, hc = evaluate(cand)
            if np.isfinite(vc) and vc >= v - 1e-12 * (1 + abs(v)):
                break
            s *= 0.5
        coef, v_old, v, gr, he = cand, v, vc, gc, hc
        if np.abs(gr).max() < 1e-8 or abs(v - v_old) < 1e-13 * (1 + abs(v)):
            break
    info_bb = -(he[p:, p:] + np.eye(K) / theta)
    return v, coef, info_bb


def _fit_lognormal(X, time, event, g, K, names, cause):
    if not event.any():
        raise ValueError(f"no events of cause {cause}")
    p = X.shape[1]
    Xc = X - X.mean(axis=0) if p else X
    rs = _RiskSets(time, event)
    cox = fit_cox_arrays(X, time, event, FitOptions(), names=names, cause=cause)
    start = {"coef": np.concatenate([cox.beta, np.zeros(K)])}

    def neg_marginal(logt):
        theta = math.exp(logt)
        v, coef, info = _ppl_fit(Xc, time, event, g, K, theta, rs, start["coef"])
        start["coef"] = coef
        sign, logdet = np.linalg.slogdet(np.eye(K) + theta * info)
        return -(v - 0.5 * logdet)

    lo, hi = math.log(VARIANCE_FLOOR), math.log(LOGNORMAL_MAX_VARIANCE)
    res = optimize.minimize_scalar(neg_marginal, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-6, "maxiter": 200})
    logt = res.x if res.fun <= neg_marginal(lo) else lo
    theta = math.exp(logt)
    v, coef, info = _ppl_fit(Xc, time, event, g, K, theta, rs, start["coef"])
    marginal = -neg_marginal(logt)
    beta, b = coef[:p], coef[p:]
    # refit the Cox part with the predicted frailties as offsets for the baseline
    fit = require_finite_fit(
        fit_cox_arrays(X, time, event, FitOptions(offsets=np.exp(b)[g], init=beta), names=names, cause=cause), X
    )
    return SharedFrailtyFit(
        cause=cause,
        distribution="lognormal",
        cox=fit,
        variance=theta,
        posterior_means=np.exp(b),
        loglik=marginal,
        loglik_no_frailty=cox.log_partial_likelihood,
        iterations=int(getattr(res, "nfev", 0)),
        converged=bool(res.success),
    )


def fit_shared_frailty(data, distribution="gamma", grouping=None, cause=1, covariates=None,
                       tolerance=1e-6, max_iterations=500) -> SharedFrailtyFit:
    """Shared-frailty Cox model for one cause.

    Parameters
    ----------
    distribution : {"gamma", "lognormal"}
        ``"gaussian"`` is accepted as an alias of ``"lognormal"``.
    grouping : None, "subject" or array_like
        Defaults to the dataset's cluster labels; ``"subject"`` gives every
        subject its own frailty.

    The gamma fit's ``loglik`` is the full marginal log-likelihood with a
    Breslow baseline; the log-normal fit's is the Laplace-approximated
    integrated partial likelihood.  Both compare against their own no-frailty
    counterpart in ``loglik_no_frailty``.
    """
    if distribution == "gaussian":
        distribution = "lognormal"
    g, K = _groups(data, grouping)
    if K < 2:
        raise ValueError("need at least two groups")
    names = data.covariate_names if covariates is None else tuple(covariates)
    X = data.covariate_matrix(names) if names else np.zeros((data.n, 0))
    event = data.status == cause
    if distribution == "gamma":
        return _fit_gamma(X, data.time, event, g, K, names, cause, tolerance, max_iterations)
    if distribution == "lognormal":
        return _fit_lognormal(X, data.time, event, g, K, names, cause)
    raise ValueError(f"unknown distribution {distribution!r}")


def fit_independent_frailty(data, covariates=None, tolerance=1e-6, max_iterations=500):
    """One gamma shared-frailty fit per cause, other causes treated as censored."""
    if data.cluster is None or data.num_clusters < 2:
        raise ValueError("need cluster labels with at least two clusters")
    ev = np.bincount(data.cluster[data.status > 0], minlength=data.num_clusters + 1)[1:]
    if not ev.any():
        raise ValueError("no cluster has any events")
    return [
        fit_shared_frailty(data, "gamma", None, j, covariates, tolerance, max_iterations)
        for j in range(1, data.num_causes + 1)
    ]
