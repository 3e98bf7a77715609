import math

import numpy as np
import pytest
from scipy.stats import chi2

from corrfrail.dataset import ClusterSummary
from corrfrail.errors import ConvergenceError, ExpansionTooLargeError, MonotoneLikelihoodError
from corrfrail.frailty import (
    FrailtyOptions,
    FrailtyParams,
    estep_posterior,
    fit_correlated_frailty,
    frailty_moments,
    observed_loglik,
    posterior_quadrature,
)
from corrfrail.shared_frailty import _gamma_logF
from corrfrail.simulate import SimConfig, simulate_dataset


def _summary(d, H):
    return ClusterSummary(cluster=1, events=np.asarray(d), size=0, loads=np.asarray(H, dtype=float))


def test_moments_closed_form():
    m = frailty_moments(FrailtyParams(1.5, (2.0, 2.5, 3.0)))
    np.testing.assert_allclose(m.variances, [1 / 3.5, 1 / 4.0, 1 / 4.5], rtol=1e-15)
    np.testing.assert_array_equal(np.round(m.variances, 3), [0.286, 0.25, 0.222])
    pairs = m.pairs()
    for (a, b), xa, xb in (((1, 2), 3.5, 4.0), ((1, 3), 3.5, 4.5), ((2, 3), 4.0, 4.5)):
        assert pairs[(a, b)] == pytest.approx(1.5 / math.sqrt(xa * xb), rel=1e-15)
    np.testing.assert_allclose(np.diag(m.correlations), 1.0)
    assert np.all(np.linalg.eigvalsh(m.correlations) >= -1e-12)


def test_independence_limit():
    m = frailty_moments(FrailtyParams(0.0, (2.0, 3.0)))
    assert m.pairs()[(1, 2)] == 0.0


def test_prior_means_without_data():
    p = FrailtyParams(1.5, (2.0, 2.5))
    post = estep_posterior(_summary([0, 0], [0.0, 0.0]), p)
    assert post.z0[0] == pytest.approx(1.5, rel=1e-14)
    np.testing.assert_allclose(post.z[0], [2.0, 2.5], rtol=1e-14)
    np.testing.assert_allclose(post.w[0], [1.0, 1.0], rtol=1e-14)


def test_single_cause_matches_quadrature():
    p = FrailtyParams(0.8, (1.7,))
    post = estep_posterior(_summary([1], [0.6]), p)
    logF, ez0, ez = posterior_quadrature([1], [0.6], p)
    assert post.z0[0] == pytest.approx(ez0, rel=1e-8)
    assert post.z[0, 0] == pytest.approx(ez[0], rel=1e-8)


def test_posterior_increases_with_events():
    p = FrailtyParams(1.2, (2.0, 0.7))
    prev = None
    for d in range(5):
        post = estep_posterior(_summary([d, 1], [0.9, 0.4]), p)
        if prev is not None:
            assert post.z0[0] > prev[0] and post.z[0, 0] > prev[1]
        prev = (post.z0[0], post.z[0, 0])


def test_exact_vs_quadrature_random_clusters(rng):
    for _ in range(25):
        p = FrailtyParams(rng.uniform(0.05, 5), tuple(rng.uniform(0.1, 5, 3)))
        d = rng.integers(0, 3, 3)
        H = rng.uniform(0, 3, 3)
        a = observed_loglik(p, None, [_summary(d, H)])
        b = observed_loglik(p, None, [_summary(d, H)], method="quadrature")
        assert a == pytest.approx(b, rel=1e-8)


def test_empty_clusters_contribute_zero():
    p = FrailtyParams(0.5, (1.0, 2.0))
    assert observed_loglik(p, None, [_summary([0, 0], [0.0, 0.0])] * 3) == 0.0


def test_single_cause_reduces_to_gamma_frailty(rng):
    d = rng.integers(0, 5, 8)
    H = rng.uniform(0, 4, 8)
    p = FrailtyParams(0.7, (1.6,))
    ours = observed_loglik(p, None, [_summary([a], [b]) for a, b in zip(d, H)])
    # W ~ Gamma(2.3, 2.3): E[W^d exp(-W H)] in closed form
    ref = _gamma_logF(2.3, d, H).sum()
    assert ours == pytest.approx(ref, rel=1e-12)


def test_large_clusters_stay_finite():
    p = FrailtyParams(1.5, (2.0, 2.5))
    post = estep_posterior(_summary([80, 30], [70.0, 25.0]), p)
    _, ez0, ez = posterior_quadrature([80, 30], [70.0, 25.0], p)
    assert post.z0[0] == pytest.approx(ez0, rel=1e-8)
    np.testing.assert_allclose(post.z[0], ez, rtol=1e-8)
    # far beyond the double range of the individual terms
    big = estep_posterior(_summary([600, 250], [550.0, 240.0]), p)
    assert np.all(np.isfinite(big.z)) and np.isfinite(big.z0[0])


def test_expansion_bound():
    p = FrailtyParams(1.0, (1.0, 1.0, 1.0))
    with pytest.raises(ExpansionTooLargeError):
        estep_posterior(_summary([200, 200, 200], [1.0, 1.0, 1.0]), p, max_terms=1e6)


@pytest.fixture(scope="module")
def k30_data():
    return simulate_dataset(SimConfig(K=30, n_per_cluster=20, seed=3))


def test_em_trace_non_decreasing(k30_data):
    fit = fit_correlated_frailty(k30_data)
    tr = np.array(fit.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-6)
    assert fit.converged
    assert fit.loglik >= fit.loglik_no_frailty - 1e-6


def test_no_frailty_data_goes_to_boundary():
    cfg = SimConfig(K=30, n_per_cluster=20, seed=5, censoring_rate=0.1)
    ds = simulate_dataset(cfg, frailties=np.ones((30, 3)))
    fit = fit_correlated_frailty(ds)
    # four frailty parameters, all near the boundary under the null
    assert fit.likelihood_ratio < chi2.ppf(0.99, 4)
    assert np.all(fit.moments.variances < 0.1)


def test_needs_clusters_and_events():
    ds = simulate_dataset(SimConfig(K=1, n_per_cluster=30, seed=1))
    with pytest.raises(ValueError):
        fit_correlated_frailty(ds)


def test_iteration_cap(k30_data):
    with pytest.raises(ConvergenceError) as err:
        fit_correlated_frailty(k30_data, options=FrailtyOptions(max_iterations=1, tolerance=1e-14))
    assert len(err.value.trace) >= 2


def test_fit_serialises(k30_data):
    import json

    fit = fit_correlated_frailty(k30_data)
    doc = json.loads(fit.to_json())
    assert set(doc) >= {"beta", "covariates"}


def test_separated_cause_is_reported():
    # cause 2 has a single event in the oldest subject at risk: its coefficient diverges
    cfg = SimConfig(K=7, n_per_cluster=13, nu0=3.5553843541538526,
                    nu=(1.1994383729816838, 1.0711557227768287, 3.429507852828975), seed=58)
    ds = simulate_dataset(cfg)
    assert np.sum(ds.status == 2) == 1
    with pytest.raises(MonotoneLikelihoodError):
        fit_correlated_frailty(ds, ("age",))


def test_simulated_frailty_means(rng):
    from corrfrail.simulate import draw_frailties

    W = draw_frailties(SimConfig(K=100_000), rng)
    xi = frailty_moments(FrailtyParams(1.5, (2.0, 2.5, 3.0))).variances
    assert np.all(np.abs(W.mean(axis=0) - 1) < 4 * np.sqrt(xi / 1e5))


def test_vanishing_shared_component_gives_independent_likelihood(rng):
    d = rng.integers(0, 4, (12, 3))
    H = rng.uniform(0, 3, (12, 3))
    nu = (1.3, 0.6, 2.2)
    summaries = [_summary(a, b) for a, b in zip(d, H)]
    ind = sum(_gamma_logF(v, d[:, j], H[:, j]).sum() for j, v in enumerate(nu))
    for nu0 in (1e-6, 1e-7):
        ours = observed_loglik(FrailtyParams(nu0, nu), None, summaries)
        assert ours == pytest.approx(ind, rel=1e-4)
