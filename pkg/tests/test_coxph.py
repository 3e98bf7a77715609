import math

import numpy as np
import pytest

from corrfrail.coxph import (
    FitOptions,
    breslow_arrays,
    breslow_baseline,
    fit_cox,
    partial_loglik,
    wald_pvalue,
)
from corrfrail.dataset import CompetingRisksDataset
from corrfrail.errors import MonotoneLikelihoodWarning, SingularInformationError
from corrfrail.simulate import SimConfig, simulate_dataset


def _tied_data(rng, n=60):
    return CompetingRisksDataset(
        time=rng.integers(1, 12, size=n).astype(float),
        status=rng.integers(0, 3, size=n),
        covariates=rng.normal(size=(n, 3)),
        num_causes=2,
    )


def test_uniform_risk_set_value():
    ds = CompetingRisksDataset(time=[1.0, 2.0], status=[1, 0], covariates=[[0.3], [-1.0]])
    v, _, _ = partial_loglik(np.zeros(1), ds, 1)
    assert v == pytest.approx(-math.log(2), abs=1e-15)


def test_gradient_and_hessian_finite_differences(rng):
    ds = _tied_data(rng)
    offsets = rng.uniform(0.5, 2.0, size=ds.n)
    for beta in (np.zeros(3), np.array([0.4, -0.7, 0.2])):
        v, g, h = partial_loglik(beta, ds, 1, offsets)
        eps = 1e-6
        g_fd = np.empty(3)
        h_fd = np.empty((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = eps
            vp, gp, _ = partial_loglik(beta + e, ds, 1, offsets)
            vm, gm, _ = partial_loglik(beta - e, ds, 1, offsets)
            g_fd[k] = (vp - vm) / (2 * eps)
            h_fd[:, k] = (gp - gm) / (2 * eps)
        assert np.max(np.abs(g - g_fd) / np.maximum(np.abs(g_fd), 1e-3)) < 1e-5
        assert np.max(np.abs(h - h_fd) / np.maximum(np.abs(h_fd), 1e-3)) < 1e-3


def test_constant_covariate_has_zero_gradient(rng):
    n = 30
    X = np.column_stack([np.full(n, 2.5), rng.normal(size=n)])
    ds = CompetingRisksDataset(time=rng.exponential(size=n) + 0.01, status=rng.integers(0, 2, size=n),
                               covariates=X)
    _, g, _ = partial_loglik(np.array([0.3, -0.2]), ds, 1)
    assert abs(g[0]) < 1e-12


def test_null_model_is_nelson_aalen():
    ds = CompetingRisksDataset(time=[1.0, 2.0, 3.0], status=[1, 1, 0])
    fit = fit_cox(ds, 1)
    assert fit.baseline(1.0) == pytest.approx(1 / 3, abs=1e-15)
    assert fit.baseline(2.0) == pytest.approx(5 / 6, abs=1e-15)


def test_breslow_with_offsets_and_ties():
    time = np.array([1.0, 1.0, 2.0, 3.0])
    event = np.array([True, True, False, True])
    X = np.array([[0.0], [1.0], [0.5], [2.0]])
    beta = np.array([0.3])
    off = np.array([1.0, 2.0, 0.5, 1.5])
    f = breslow_arrays(beta, X, time, event, off)
    r = off * np.exp(X[:, 0] * beta[0])
    # exhaustive risk-set sums
    j1 = 2 / r.sum()
    j3 = 1 / r[3]
    np.testing.assert_allclose(f.breakpoints, [1.0, 3.0])
    np.testing.assert_allclose(f.values, [j1, j1 + j3], rtol=1e-14)
    f2 = breslow_arrays(beta, X, time, event, 2 * off)
    np.testing.assert_allclose(f2.increments(), f.increments() / 2, rtol=1e-14)


def test_beta_zero_unit_offsets_is_nelson_aalen(rng):
    ds = _tied_data(rng, 40)
    fit = fit_cox(ds, 1, covariates=())
    ev = ds.status == 1
    times = np.unique(ds.time[ev])
    na = np.cumsum([np.sum(ev & (ds.time == t)) / np.sum(ds.time >= t) for t in times])
    np.testing.assert_allclose(fit.baseline.values, na, rtol=1e-14)


def test_beta_recovery_at_n2000():
    cfg = SimConfig(K=1, n_per_cluster=2000, nu0=0.0, nu=(1.0,), weibull_scale=(5.0,),
                    weibull_shape=(1.0,), censoring_rate=0.1, beta=((-0.03, 0.5, 0.3),), seed=11)
    ds = simulate_dataset(cfg, frailties=np.ones((1, 1)))
    fit = fit_cox(ds, 1)
    z = (fit.beta - np.array(cfg.beta[0])) / fit.standard_errors
    assert np.all(np.abs(z) < 3)


def test_separation_flags_monotone_likelihood():
    x = np.array([0, 0, 0, 1, 1, 1], dtype=float)
    # group 1 fails last, after group 0 is censored, so beta diverges upward
    ds = CompetingRisksDataset(time=[4.0, 5.0, 6.0, 1.0, 2.0, 3.0], status=[0, 0, 0, 1, 1, 1],
                               covariates=x[:, None])
    with pytest.warns(MonotoneLikelihoodWarning):
        fit = fit_cox(ds, 1)
    assert fit.monotone_likelihood


def test_collinear_columns_named():
    x = np.arange(1.0, 7.0)
    ds = CompetingRisksDataset(time=[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], status=[1, 0, 1, 1, 0, 1],
                               covariates=np.column_stack([x, 2 * x]), covariate_names=("a", "b"))
    with pytest.raises(SingularInformationError) as err:
        fit_cox(ds, 1)
    assert "b" in str(err.value) or "a" in str(err.value)


def test_wald_pvalue_values(rng):
    ds = _tied_data(rng, 80)
    fit = fit_cox(ds, 1)
    from dataclasses import replace

    zero = replace(fit, beta=np.zeros(3))
    assert wald_pvalue(zero, 0) == 1.0
    se = fit.standard_errors[0]
    at = replace(fit, beta=np.array([1.959964 * se, 0, 0]))
    assert wald_pvalue(at, 0) == pytest.approx(0.05, abs=1e-6)
    ps = [wald_pvalue(replace(fit, beta=np.array([k * se, 0, 0])), 0) for k in (1, 2, 4, 8)]
    assert all(a > b for a, b in zip(ps, ps[1:]))
    assert wald_pvalue(fit, fit.covariate_names[1]) == pytest.approx(fit.wald_p_values[1])


def test_offsets_shift_baseline_not_beta(rng):
    ds = _tied_data(rng, 80)
    f1 = fit_cox(ds, 1)
    f2 = fit_cox(ds, 1, options=FitOptions(offsets=np.full(ds.n, 3.0)))
    np.testing.assert_allclose(f1.beta, f2.beta, atol=1e-9)
    np.testing.assert_allclose(f2.baseline.values * 3.0, f1.baseline.values, rtol=1e-9)


def test_breslow_baseline_matches_fit(rng):
    ds = _tied_data(rng, 50)
    fit = fit_cox(ds, 2)
    np.testing.assert_allclose(breslow_baseline(fit, ds).values, fit.baseline.values, rtol=1e-12)


def test_fit_json_round_trip(rng):
    import json

    fit = fit_cox(_tied_data(rng, 50), 1)
    doc = json.loads(fit.to_json())
    assert doc["beta"] == pytest.approx(fit.beta.tolist())


def test_cause_specific_censoring_equivalence(rng):
    ds = _tied_data(rng, 80)
    recoded = CompetingRisksDataset(time=ds.time, status=np.where(ds.status == 2, 1, 0),
                                    covariates=ds.covariates, num_causes=1)
    a = fit_cox(ds, 2)
    b = fit_cox(recoded, 1)
    np.testing.assert_array_equal(a.beta, b.beta)
    np.testing.assert_array_equal(a.baseline.values, b.baseline.values)


def test_covariate_shift_rescales_baseline(rng):
    ds = _tied_data(rng, 80)
    c = np.array([3.0, -1.5, 10.0])
    shifted = ds.replace(covariates=ds.covariates + c)
    a = fit_cox(ds, 1)
    b = fit_cox(shifted, 1)
    np.testing.assert_allclose(b.beta, a.beta, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(b.baseline.values, a.baseline.values * math.exp(-a.beta @ c), rtol=1e-8)


def test_newton_steps_never_decrease(rng):
    ds = _tied_data(rng, 120)
    fit = fit_cox(ds, 1)
    values = [v for _, v, _ in fit.trace]
    assert len(values) >= 3
    assert np.all(np.diff(values) >= -1e-12 * abs(values[0]))
