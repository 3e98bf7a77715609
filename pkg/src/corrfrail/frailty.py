r"""Additive correlated gamma frailty for cause-specific hazards.

Within cluster ``k`` the cause-``j`` frailty is

.. math::

    W_{kj} = \frac{Z_{k0} + Z_{kj}}{\nu_0 + \nu_j},\qquad
    Z_{k0} \sim \Gamma(\nu_0, 1),\ Z_{kj} \sim \Gamma(\nu_j, 1),

so ``E[W_kj] = 1``, ``Var(W_kj) = 1/(nu0 + nu_j)`` and
``Corr(W_kj1, W_kj2) = nu0 * sqrt(xi_j1 * xi_j2)``.

Integrating the frailties out of the complete-data likelihood of one cluster
only involves the cluster's event counts ``d_kj`` and accumulated hazard
loads ``H_kj``.  Expanding ``prod_j (Z0 + Zj)^{d_j}`` binomially turns the
posterior into a finite mixture of independent gamma laws; mixture terms are
grouped by the total power of ``Z0`` so the sum is a convolution over causes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammaln, logsumexp, roots_genlaguerre

from .coxph import CoxFit, FitOptions, fit_cox_arrays, require_finite_fit
from .dataset import CompetingRisksDataset, ClusterSummary, cluster_summaries, subject_loads
from .errors import ConvergenceError, ExpansionTooLargeError

NU_LOWER = 1e-6
NU_UPPER = 1e8
NU_STARTS = ((1.0, 1.0), (0.2, 3.0), (5.0, 0.5))


@dataclass(frozen=True)
class FrailtyParams:
    nu0: float
    nu: tuple

    def __post_init__(self):
        object.__setattr__(self, "nu", tuple(float(v) for v in np.atleast_1d(self.nu)))
        object.__setattr__(self, "nu0", float(self.nu0))

    @property
    def num_causes(self):
        return len(self.nu)

    def as_array(self):
        return np.array([self.nu0, *self.nu])


@dataclass(frozen=True)
class FrailtyMoments:
    variances: np.ndarray
    correlations: np.ndarray

    def pairs(self):
        """``{(j1, j2): rho}`` for ``j1 < j2`` (1-based causes)."""
        J = self.variances.size
        return {(a + 1, b + 1): float(self.correlations[a, b]) for a in range(J) for b in range(a + 1, J)}


def frailty_moments(params: FrailtyParams) -> FrailtyMoments:
    """Variances ``1/(nu0 + nu_j)`` and correlations ``nu0 sqrt(xi_j1 xi_j2)``."""
    nu = np.asarray(params.nu, dtype=float)
    if params.nu0 < 0 or np.any(nu <= 0):
        raise ValueError("need nu0 >= 0 and nu_j > 0")
    xi = 1.0 / (params.nu0 + nu)
    rho = params.nu0 * np.sqrt(np.outer(xi, xi))
    np.fill_diagonal(rho, 1.0)
    return FrailtyMoments(variances=xi, correlations=rho)


# ---------------------------------------------------------------- exact path


def _log_rising(nu, nmax):
    """Table ``T[n] = log Gamma(nu + n) - log Gamma(nu)`` for ``n = 0..nmax``."""
    return np.concatenate([[0.0], np.cumsum(np.log(nu + np.arange(nmax)))])


def _conv_rows_log(la, lb):
    """Row-wise full convolution of two arrays held as logs."""
    if la.shape[1] < lb.shape[1]:
        la, lb = lb, la
    out = np.full((la.shape[0], la.shape[1] + lb.shape[1] - 1), -np.inf)
    na = la.shape[1]
    for i in range(lb.shape[1]):
        out[:, i:i + na] = np.logaddexp(out[:, i:i + na], la + lb[:, i:i + 1])
    return out


def _cause_terms(d, h, nu_j):
    """Log binomial-expansion weights of one cause, indexed by the Z0 power m.

    ``log a(m) = log C(d, m) + log Gamma(nu_j + d - m) - log Gamma(nu_j)
    - (nu_j + d - m) log(1 + h)``, ``-inf`` where ``m > d``.
    """
    D = int(d.max(initial=0))
    m = np.arange(D + 1)[None, :]
    dd = d[:, None]
    valid = m <= dd
    r = np.where(valid, dd - m, 0)
    T = _log_rising(nu_j, D)
    la = (gammaln(dd + 1) - gammaln(m + 1) - gammaln(np.where(valid, r, 0) + 1)
          + T[r] - (nu_j + r) * np.log1p(h)[:, None])
    return np.where(valid, la, -np.inf)


def _check_terms(d, max_terms):
    terms = np.prod(d + 1.0, axis=1)
    if np.any(terms > max_terms):
        raise ExpansionTooLargeError(
            f"exact expansion needs {int(terms.max())} terms (> {max_terms:g}); "
            "use the quadrature path (method='quadrature') or raise max_terms"
        )


def _frailty_terms(d, H, params, need_posterior, max_terms=1e6):
    """Exact log marginal frailty factor and posterior means for every cluster.

    ``d`` and ``H`` are (K, J).  Returns ``log F`` (K,), and if requested
    ``E[Z0 | data]`` (K,) and ``E[Zj | data]`` (K, J).  ``F_k`` is
    ``E[prod_j W_kj^d_kj exp(-W_kj H_kj)]`` under the frailty law.
    """
    d = np.asarray(d, dtype=np.int64)
    H = np.asarray(H, dtype=float)
    _check_terms(d, max_terms)
    K, J = d.shape
    nu0 = params.nu0
    nu = np.asarray(params.nu)
    c = nu0 + nu
    h = H / c
    A = h.sum(axis=1)

    # everything stays in log space: clusters with hundreds of events span
    # far more than the double range
    la = [_cause_terms(d[:, j], h[:, j], nu[j]) for j in range(J)]
    LB = la[0]
    for j in range(1, J):
        LB = _conv_rows_log(LB, la[j])
    Mmax = LB.shape[1] - 1
    M = np.arange(Mmax + 1)[None, :]
    lg0 = _log_rising(nu0, Mmax)[M] - (nu0 + M) * np.log1p(A)[:, None]
    lw = LB + lg0
    lse = logsumexp(lw, axis=1)
    logF = lse - (d * np.log(c)).sum(axis=1)
    if not need_posterior:
        return logF, None, None

    w = np.exp(lw - lse[:, None])
    ez0 = (w * (nu0 + M)).sum(axis=1) / (1.0 + A)
    ezj = np.empty((K, J))
    for j in range(J):
        others = [la[i] for i in range(J) if i != j]
        LBo = others[0] if others else np.zeros((K, 1))
        for o in others[1:]:
            LBo = _conv_rows_log(LBo, o)
        Dj = la[j].shape[1] - 1
        # P(m_j = m) is proportional to a_j(m) * sum_M' Bo(M') g0(M' + m)
        lcorr = np.full((K, Dj + 1), -np.inf)
        for m in range(Dj + 1):
            span = min(LBo.shape[1], Mmax + 1 - m)
            if span > 0:
                lcorr[:, m] = logsumexp(LBo[:, :span] + lg0[:, m:m + span], axis=1)
        lpm = la[j] + lcorr
        pm = np.exp(lpm - logsumexp(lpm, axis=1, keepdims=True))
        mj = np.arange(Dj + 1)[None, :]
        ezj[:, j] = (pm * (nu[j] + d[:, j:j + 1] - mj)).sum(axis=1) / (1.0 + h[:, j])
    return logF, ez0, ezj


def _summary_arrays(summaries):
    if isinstance(summaries, ClusterSummary):
        summaries = [summaries]
    d = np.array([s.events for s in summaries], dtype=np.int64)
    H = np.array([s.loads for s in summaries], dtype=float)
    return d, H


@dataclass(frozen=True)
class Posterior:
    """Posterior means of the frailty components for each cluster."""

    z0: np.ndarray
    z: np.ndarray
    params: FrailtyParams

    @property
    def w(self):
        """``E[W_kj | data] = (E[Z_k0] + E[Z_kj]) / (nu0 + nu_j)``."""
        c = self.params.nu0 + np.asarray(self.params.nu)
        return (self.z0[:, None] + self.z) / c


def estep_posterior(summary, params: FrailtyParams, loads=None, max_terms=1e6) -> Posterior:
    """Exact posterior means ``E[Z_k0 | data]`` and ``E[Z_kj | data]``.

    ``summary`` is a :class:`ClusterSummary` or a sequence of them.  When
    ``loads`` is given it overrides the summaries' hazard loads.

    Raises
    ------
    ExpansionTooLargeError
        ``prod_j (d_kj + 1)`` exceeds ``max_terms``; fall back to
        :func:`posterior_quadrature`.
    """
    d, H = _summary_arrays(summary)
    if loads is not None:
        H = np.atleast_2d(np.asarray(loads, dtype=float))
    if np.any(d < 0) or np.any(H < 0):
        raise ValueError("event counts and loads must be non-negative")
    _, z0, z = _frailty_terms(d, H, params, True, max_terms)
    return Posterior(z0=z0, z=z, params=params)


# ----------------------------------------------------------- quadrature path


def _gamma_integral(f, shape, vec=False):
    """``int_0^inf z^(shape-1) f(z) dz`` via ``u = z^shape`` (removes the endpoint singularity)."""
    def g(u):
        return f(u ** (1.0 / shape)) / shape

    if vec:
        return integrate.quad_vec(g, 0.0, np.inf, epsabs=0.0, epsrel=1e-13, limit=400)[0]
    return integrate.quad(g, 0.0, np.inf, epsabs=0.0, epsrel=1e-13, limit=400)[0]


def posterior_quadrature(d, H, params: FrailtyParams):
    """Marginal frailty factor and posterior means of one cluster by quadrature.

    Independent of the binomial expansion.  ``Z0`` is integrated adaptively;
    for each node the cause-specific ``Zj`` integrals use a generalized
    Gauss-Laguerre rule, which is exact there because ``(z0 + z)^d`` is a
    polynomial in ``z``.  Returns ``(log F, E[Z0], E[Zj])``.
    """
    d = np.asarray(d, dtype=float)
    H = np.asarray(H, dtype=float)
    nu0 = params.nu0
    nu = np.asarray(params.nu)
    J = nu.size
    c = nu0 + nu
    h = H / c
    rules = []
    for j in range(J):
        x, w = roots_genlaguerre(int(d[j]) // 2 + 2, nu[j] - 1.0)
        # z = x / (1 + h_j) absorbs the exp(-z h_j) factor into the weight
        z = x / (1.0 + h[j])
        scale = math.exp(-nu[j] * math.log1p(h[j]) - math.lgamma(nu[j]))
        rules.append((z, w * scale))
    lg0 = math.lgamma(nu0)

    def outer(z0):
        base = np.empty(J)
        first = np.empty(J)
        for j, (z, w) in enumerate(rules):
            poly = (z0 + z) ** d[j]
            base[j] = np.dot(w, poly)
            first[j] = np.dot(w, poly * z)
        pre = math.exp(-z0 * (1.0 + h.sum()) - lg0)
        prod = np.prod(base)
        return np.concatenate([[pre * prod, pre * prod * z0], pre * prod * first / base])

    res = _gamma_integral(outer, nu0, vec=True)
    F = res[0]
    logF = math.log(F) - float((d * np.log(c)).sum())
    return logF, res[1] / F, res[2:] / F


# ---------------------------------------------------------- observed likelihood


def _event_terms(data, fits):
    """sum over events of log(baseline jump) + linear predictor, per cause."""
    out = 0.0
    for j, fit in enumerate(fits, start=1):
        ev = data.status == j
        if not ev.any():
            continue
        X = data.covariate_matrix(fit.covariate_names) if fit.covariate_names else np.zeros((data.n, 0))
        bp = fit.baseline.breakpoints
        jumps = fit.baseline.increments()
        pos = np.searchsorted(bp, data.time[ev])
        out += np.log(jumps[pos]).sum() + (X[ev] @ fit.beta).sum()
    return float(out)


def observed_loglik(params: FrailtyParams, fits, summaries, data=None, method="exact", max_terms=1e6):
    """Marginal log-likelihood with the frailties integrated out.

    Without ``data`` only the frailty part ``sum_k log F_k`` is returned;
    with ``data`` the event terms ``sum log dLambda_j0(t_i) + beta_j' x_i``
    of the Breslow point-mass baselines in ``fits`` are added.

    ``method="quadrature"`` uses :func:`posterior_quadrature` instead of the
    closed form; ``"auto"`` tries the closed form and falls back.
    """
    d, H = _summary_arrays(summaries)
    if method == "auto":
        try:
            return observed_loglik(params, fits, summaries, data, "exact", max_terms)
        except (ExpansionTooLargeError, FloatingPointError, ValueError):
            return observed_loglik(params, fits, summaries, data, "quadrature", max_terms)
    if method == "exact":
        logF = _frailty_terms(d, H, params, False, max_terms)[0]
    elif method == "quadrature":
        logF = np.array([posterior_quadrature(d[k], H[k], params)[0] for k in range(d.shape[0])])
    else:
        raise ValueError(f"unknown method {method!r}")
    total = float(logF.sum())
    if not np.isfinite(total):
        raise FloatingPointError("marginal likelihood overflowed")
    if data is not None:
        total += _event_terms(data, fits)
    return total


def no_frailty_loglik(data, fits):
    """Full (Breslow point-mass) log-likelihood with every frailty fixed at 1."""
    loads = subject_loads(data, fits)
    return _event_terms(data, fits) - float(loads.sum())


# ------------------------------------------------------------------- EM fit


@dataclass(frozen=True)
class FrailtyOptions:
    tolerance: float = 1e-6
    max_iterations: int = 500
    nu_lower: float = NU_LOWER
    nu_upper: float = NU_UPPER
    max_terms: float = 1e6
    init: FrailtyParams | None = None
    cox: FitOptions = FitOptions()
    bootstrap_replicates: int = 0
    seed: int = 0


@dataclass(frozen=True)
class CorrelatedFrailtyFit:
    cause_fits: tuple
    params: FrailtyParams
    moments: FrailtyMoments
    posterior_z0: np.ndarray
    posterior_z: np.ndarray
    loglik_trace: tuple
    loglik: float
    loglik_no_frailty: float
    iterations: int
    converged: bool
    covariate_names: tuple
    intervals: dict | None = None

    @property
    def betas(self):
        return [f.beta for f in self.cause_fits]

    @property
    def likelihood_ratio(self):
        """``2 (l_frailty - l_no_frailty)``."""
        return 2.0 * (self.loglik - self.loglik_no_frailty)

    @property
    def posterior_w(self):
        c = self.params.nu0 + np.asarray(self.params.nu)
        return (self.posterior_z0[:, None] + self.posterior_z) / c

    def to_dict(self):
        out = {
            "covariates": list(self.covariate_names),
            "beta": [f.beta.tolist() for f in self.cause_fits],
            "baselines": [f.baseline.to_dict() for f in self.cause_fits],
            "nu0": self.params.nu0,
            "nu": list(self.params.nu),
            "frailty_variances": self.moments.variances.tolist(),
            "frailty_correlations": {f"{a}-{b}": r for (a, b), r in self.moments.pairs().items()},
            "posterior_z0": self.posterior_z0.tolist(),
            "posterior_z": self.posterior_z.tolist(),
            "loglik": self.loglik,
            "loglik_no_frailty": self.loglik_no_frailty,
            "em_trace": list(self.loglik_trace),
            "iterations": self.iterations,
            "converged": self.converged,
        }
        if self.intervals is not None:
            out["intervals"] = self.intervals
        return out

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _check_clustered(data):
    if data.cluster is None:
        raise ValueError("dataset has no cluster labels")
    if data.num_clusters < 2:
        raise ValueError("need at least two clusters: frailty variance is unidentifiable")
    counts = np.bincount(data.status, minlength=data.num_causes + 1)[1:]
    missing = [j + 1 for j in range(data.num_causes) if counts[j] == 0]
    if missing:
        raise ValueError(f"no events for cause(s) {missing}")


def _fit_nu(d, H, start, options, multistart=False):
    """Maximise ``sum_k log F_k`` over log(nu0, nu_1..nu_J) inside the bounds."""
    J = d.shape[1]
    lo, hi = math.log(options.nu_lower), math.log(options.nu_upper)

    def negll(x):
        p = FrailtyParams(math.exp(x[0]), tuple(np.exp(x[1:])))
        return -_frailty_terms(d, H, p, False, options.max_terms)[0].sum()

    # the surface has corner optima (e.g. nu0 at its upper bound), so a few
    # fixed starts accompany the warm start
    starts = [start.as_array()]
    if multistart:
        starts += [np.array([a] + [b] * J) for a, b in NU_STARTS]
    best_x, best_f = None, np.inf
    for s0 in starts:
        x0 = np.clip(np.log(s0), lo, hi)
        f0 = negll(x0)
        if f0 < best_f:
            best_x, best_f = x0, f0
        res = optimize.minimize(negll, x0, method="L-BFGS-B", bounds=[(lo, hi)] * (J + 1),
                                options={"ftol": 1e-13, "gtol": 1e-9, "maxiter": 200})
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
    if best_x is None:
        raise ArithmeticError("observed likelihood is not finite at any starting value")
    return FrailtyParams(math.exp(best_x[0]), tuple(np.exp(best_x[1:])))


def _refit_causes(data, X, names, offsets_by_cause, prev):
    fits = []
    for j in range(1, data.num_causes + 1):
        init = None if prev is None else prev[j - 1].beta
        opts = FitOptions(offsets=offsets_by_cause[:, j - 1], init=init)
        fits.append(require_finite_fit(fit_cox_arrays(X, data.time, data.status == j, opts, names=names, cause=j), X))
    return fits


def fit_correlated_frailty(data: CompetingRisksDataset, covariates=None,
                           options: FrailtyOptions = FrailtyOptions()) -> CorrelatedFrailtyFit:
    """EM fit of the additive correlated gamma frailty competing-risks model.

    E-step: exact posterior means per cluster.  M-step: per cause, a Cox fit
    with subject offsets ``E[W_kj | data]`` and its Breslow baseline; then
    ``(nu0, nu_1..nu_J)`` maximise the observed likelihood with ``beta`` and
    the baselines held fixed.  Stops when the observed log-likelihood changes
    by less than ``options.tolerance``.

    Raises
    ------
    ValueError
        Fewer than two clusters or a cause without events.
    ConvergenceError
        ``options.max_iterations`` reached (``trace`` holds the EM trace).
    """
    _check_clustered(data)
    names = data.covariate_names if covariates is None else tuple(covariates)
    X = data.covariate_matrix(names) if names else np.zeros((data.n, 0))
    K, J = data.num_clusters, data.num_causes
    cl = data.cluster - 1

    view = data.replace(covariates=X, covariate_names=names)

    def loads(fs):
        return np.array([s.loads for s in cluster_summaries(view, fs)])

    fits = _refit_causes(data, X, names, np.ones((data.n, J)), None)
    ll_none = no_frailty_loglik(view, fits)
    d = np.array([s.events for s in cluster_summaries(view, fits)])
    H = loads(fits)
    params = options.init or FrailtyParams(1.0, (1.0,) * J)
    params = _fit_nu(d, H, params, options, multistart=True)
    ll = observed_loglik(params, fits, _as_summaries(d, H), view, max_terms=options.max_terms)
    trace = [ll]
    converged = False
    it = 0
    while it < options.max_iterations:
        it += 1
        _, z0, z = _frailty_terms(d, H, params, True, options.max_terms)
        W = (z0[:, None] + z) / (params.nu0 + np.asarray(params.nu))
        fits = _refit_causes(data, X, names, W[cl], fits)
        H = loads(fits)
        params = _fit_nu(d, H, params, options)
        ll_new = observed_loglik(params, fits, _as_summaries(d, H), view, max_terms=options.max_terms)
        trace.append(ll_new)
        if abs(ll_new - ll) < options.tolerance:
            ll = ll_new
            # leave a corner optimum of the frailty surface if one was reached
            alt = _fit_nu(d, H, params, options, multistart=True)
            ll_alt = observed_loglik(alt, fits, _as_summaries(d, H), view, max_terms=options.max_terms)
            if ll_alt > ll + options.tolerance:
                params, ll = alt, ll_alt
                trace.append(ll)
                continue
            converged = True
            break
        ll = ll_new
    if not converged:
        raise ConvergenceError(f"EM did not converge in {options.max_iterations} iterations", trace)

    _, z0, z = _frailty_terms(d, H, params, True, options.max_terms)
    fit = CorrelatedFrailtyFit(
        cause_fits=tuple(fits),
        params=params,
        moments=frailty_moments(params),
        posterior_z0=z0,
        posterior_z=z,
        loglik_trace=tuple(trace),
        loglik=ll,
        loglik_no_frailty=ll_none,
        iterations=it,
        converged=converged,
        covariate_names=names,
    )
    if options.bootstrap_replicates:
        from .inference import standard_errors

        ivals = standard_errors(fit, data, replicates=options.bootstrap_replicates, seed=options.seed)
        fit = _with_intervals(fit, ivals.to_dict())
    return fit


def _with_intervals(fit, intervals):
    from dataclasses import replace

    return replace(fit, intervals=intervals)


def _as_summaries(d, H):
    return [ClusterSummary(cluster=k + 1, events=d[k], size=0, loads=H[k]) for k in range(d.shape[0])]
