import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import taylor_proxy_naive, taylor_proxy_rows
from diffpmcmc.clustering import cluster, standardize
from diffpmcmc.data import select_rows, synth_logistic
from diffpmcmc.errors import ValidationError
from diffpmcmc.estimator import DifferenceEstimator, draw_subsample, estimate, evaluate_w
from diffpmcmc.model import LogisticModel


def make_estimator(data, eps, exact_predicate=None):
    exact = select_rows(data, exact_predicate)
    rows = np.setdiff1d(np.arange(data.n), exact)
    zs, rec = standardize(data.Z, exempt=data.exempt_columns)
    cm = cluster(zs, eps, z=data.Z, rows=rows, standardization=rec)
    return DifferenceEstimator(data, cm, LogisticModel(), exact), cm


def enumerate_moments(est, theta, m):
    """Exact expectations of l_hat and sigma2_hat over all n**m ordered subsamples."""
    rows = est.est_rows
    vals = [est.estimate(theta, rows[list(u)]) for u in itertools.product(range(rows.size), repeat=m)]
    return np.mean([v.l_hat for v in vals]), np.mean([v.sigma2_hat for v in vals])


@pytest.mark.parametrize("m", [2, 3])
def test_enumeration_unbiased(m):
    data = synth_logistic(5, 3, [0.2, 1.0, -0.5], seed=1)
    est, cm = make_estimator(data, 1.5)
    assert 1 < cm.n_clusters < 5
    rng = np.random.default_rng(0)
    for _ in range(3):
        theta = rng.normal(size=3)
        proxy = est.proxy(theta)
        d = LogisticModel().log_density(data.y, data.X, theta) - taylor_proxy_rows(LogisticModel(), cm, data, theta)
        e_l, e_s2 = enumerate_moments(est, theta, m)
        assert e_l == pytest.approx(est.full_loglik(theta), rel=1e-12)
        assert e_s2 == pytest.approx(5 / m * np.sum((d - d.mean()) ** 2), rel=1e-12)
        assert proxy.w == pytest.approx(taylor_proxy_rows(LogisticModel(), cm, data, theta).sum(), rel=1e-12)


def test_enumeration_with_exact_stratum():
    data = synth_logistic(7, 2, [0.0, 1.5], seed=3)
    data.y[:] = [1, 0, 0, 1, 0, 0, 0]
    est, _ = make_estimator(data, 2.0, "y==1")
    assert est.n_est == 5
    theta = np.array([0.3, -0.7])
    e_l, _ = enumerate_moments(est, theta, 2)
    assert e_l == pytest.approx(est.full_loglik(theta), rel=1e-12)
    one = est.estimate(theta, est.est_rows[:3])
    assert one.de_count == est.clusters.n_clusters + 3 + 2


def test_compact_sum_matches_rowwise_loop():
    data = synth_logistic(300, 4, [0.5, 1.0, -1.0, 0.3], seed=2)
    est, cm = make_estimator(data, 0.8)
    rng = np.random.default_rng(1)
    for _ in range(5):
        theta = rng.normal(size=4)
        naive = taylor_proxy_naive(LogisticModel(), cm, data, theta, cm.rows).sum()
        w, count = est.evaluate_w(theta)
        assert w == pytest.approx(naive, rel=1e-10)
        assert count == cm.n_clusters
        assert evaluate_w(cm, LogisticModel(), theta)[0] == pytest.approx(naive, rel=1e-10)


def test_differences_oracle():
    data = synth_logistic(200, 3, [0.1, 0.5, 0.5], seed=4)
    est, cm = make_estimator(data, 0.6)
    theta = np.array([0.2, -0.3, 0.4])
    rows = np.array([5, 17, 17, 100, 3])
    e = est.estimate(theta, rows)
    d = LogisticModel().log_density(data.y[rows], data.X[rows], theta) - taylor_proxy_rows(LogisticModel(), cm, data, theta, rows)
    np.testing.assert_allclose(e.d_values, d, atol=1e-12)
    assert e.l_hat == pytest.approx(e.w + data.n * d.mean(), rel=1e-12)
    assert e.sigma2_hat == pytest.approx(data.n**2 / 5 * d.var(ddof=1), rel=1e-10)
    assert e.corrected == pytest.approx(e.l_hat - e.sigma2_hat / 2)
    assert e.de_count == cm.n_clusters + 5


def test_perfect_proxy_zero_variance():
    data = synth_logistic(60, 3, [0.0, 1.0, 1.0], seed=5)
    est, cm = make_estimator(data, 1e-12)
    assert cm.n_clusters == 60
    e = est.estimate(np.array([0.5, -1.0, 0.2]), np.arange(10))
    assert e.sigma2_hat == 0.0
    assert e.l_hat == pytest.approx(est.full_loglik(np.array([0.5, -1.0, 0.2])), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(1, 40), st.integers(0, 2**31))
def test_augment_equals_recompute(m, extra, seed):
    data = synth_logistic(150, 3, [0.3, 0.6, -0.2], seed=6)
    est, _ = make_estimator(data, 0.7)
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=3)
    a = rng.integers(0, 150, m)
    b = rng.integers(0, 150, extra)
    grown = est.augment(est.estimate(theta, a), b)
    fresh = est.estimate(theta, np.concatenate([a, b]))
    assert grown.m == m + extra
    assert grown.l_hat == pytest.approx(fresh.l_hat, rel=1e-10, abs=1e-10)
    assert grown.sigma2_hat == pytest.approx(fresh.sigma2_hat, rel=1e-8, abs=1e-10)


def test_subsample_uniform_frequencies():
    rng = np.random.default_rng(7)
    u = np.concatenate([draw_subsample(rng, 10, 500).u for _ in range(100)])
    counts = np.bincount(u, minlength=10)
    assert stats.chisquare(counts).pvalue > 1e-3
    with pytest.raises(ValidationError):
        draw_subsample(rng, 10, 1)


def test_clt_standardized_error():
    data = synth_logistic(3000, 3, [0.5, 1.0, -1.0], seed=8)
    est, _ = make_estimator(data, 0.5)
    theta = np.array([0.4, 0.9, -1.1])
    truth = est.full_loglik(theta)
    rng = np.random.default_rng(9)
    z = []
    for _ in range(1500):
        e = est.estimate(theta, est.est_rows[rng.integers(0, est.n_est, 400)])
        z.append((e.l_hat - truth) / np.sqrt(e.sigma2_hat))
    z = np.array(z)
    assert abs(z.mean()) < 0.12
    assert 0.8 < z.std() < 1.25


def test_rejects_rows_from_exact_stratum():
    data = synth_logistic(50, 2, [0.0, 1.0], seed=10)
    est, _ = make_estimator(data, 0.5, "y==1")
    with pytest.raises(ValidationError):
        est.estimate(np.zeros(2), est.exact_rows[:2])
    with pytest.raises(ValidationError):
        est.estimate(np.zeros(2), [0])


def test_module_level_estimate():
    data = synth_logistic(80, 2, [0.0, 1.0], seed=11)
    est, cm = make_estimator(data, 0.5)
    theta = np.array([0.1, 0.2])
    a = estimate(cm, data, LogisticModel(), theta, np.arange(8))
    assert a.l_hat == est.estimate(theta, np.arange(8)).l_hat


def test_frozen_hessian_still_unbiased():
    data = synth_logistic(5, 2, [0.2, 1.0], seed=12)
    zs, rec = standardize(data.Z, exempt=data.exempt_columns)
    cm = cluster(zs, 2.0, z=data.Z, standardization=rec)
    est = DifferenceEstimator(data, cm, LogisticModel(), freeze_hessian_at=np.array([0.0, 0.5]))
    theta = np.array([0.7, -0.4])
    e_l, _ = enumerate_moments(est, theta, 2)
    assert e_l == pytest.approx(est.full_loglik(theta), rel=1e-12)
