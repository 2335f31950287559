import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffpmcmc.diagnostics import (
    EfficiencyReport,
    effective_draws,
    efficiency_report,
    inefficiency_factor,
    mean_equality_test,
    relative_report,
)
from diffpmcmc.errors import NumericalError, ValidationError


def ar1(rho, n, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1 - rho**2)
    for i in range(1, n):
        x[i] = rho * x[i - 1] + e[i]
    return x


def test_iid_chain_has_unit_if():
    x = np.random.default_rng(0).normal(size=50_000)
    assert inefficiency_factor(x) == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("rho", [0.5, 0.9])
def test_ar1_if(rho):
    x = ar1(rho, 200_000, seed=1)
    assert inefficiency_factor(x) == pytest.approx((1 + rho) / (1 - rho), rel=0.1)


def test_if_errors():
    with pytest.raises(ValidationError):
        inefficiency_factor(np.ones(10))
    with pytest.raises(NumericalError):
        inefficiency_factor(np.ones(2000))


def test_effective_draws_arithmetic():
    assert effective_draws(1000, 2.0, 5.0) == 100.0
    assert effective_draws(1, 1, 1) / effective_draws(1, 1, 0.0948) == pytest.approx(0.0948)
    assert 1 / 0.0948 == pytest.approx(10.55, abs=0.01)


def test_relative_report():
    a = EfficiencyReport(np.array([2.0, 4.0]), np.array([10.0, 5.0]), 1.0, 100)
    b = EfficiencyReport(np.array([1.0, 2.0]), np.array([2.0, 2.5]), 1.0, 100)
    rif, red = relative_report(a, b)
    np.testing.assert_allclose(rif, [2.0, 2.0])
    np.testing.assert_allclose(red, [5.0, 2.0])
    assert a.to_dict()["rif"] == [2.0, 2.0]


def test_efficiency_report_shapes():
    draws = np.random.default_rng(2).normal(size=(2000, 3))
    rep = efficiency_report(draws, 50.0)
    assert rep.if_per_param.shape == (3,)
    np.testing.assert_allclose(rep.ed, 2000 / (rep.if_per_param * 50.0))


def test_mean_test_calibration():
    rng = np.random.default_rng(3)
    rejects = 0
    trials = 400
    for t in range(trials):
        a = ar1(0.5, 2000, seed=10_000 + t)
        b = ar1(0.5, 2000, seed=20_000 + t)
        rejects += mean_equality_test(a, b)[0].reject
    rate = rejects / trials
    assert 0.01 < rate < 0.10


def test_mean_test_detects_shift():
    a = ar1(0.5, 5000, seed=4)
    b = ar1(0.5, 5000, seed=5) + 0.5
    assert mean_equality_test(a, b)[0].reject


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_mean_test_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(1200, 2)), rng.normal(size=(1500, 2))
    for x, y in zip(mean_equality_test(a, b), mean_equality_test(b, a)):
        assert x.difference == pytest.approx(-y.difference)
        assert x.se == pytest.approx(y.se)
        assert x.reject == y.reject


def test_mean_test_validation():
    with pytest.raises(ValidationError):
        mean_equality_test(np.zeros((2000, 2)), np.zeros((2000, 3)))
    with pytest.raises(ValidationError):
        mean_equality_test(np.zeros(50), np.zeros(50))
