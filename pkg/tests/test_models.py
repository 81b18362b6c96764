import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from cmest import models as M
from cmest import numerics as N
from cmest.errors import DomainError, ParseError


def log_dens(model, theta):
    return lambda x: model.log_h(x) + model.support.sign * theta * x - model.log_partition(theta)


CASES = [
    (M.normal(), 0.7, stats.norm(0.7, 1.0)),
    (M.normal(2.0), -0.3, stats.norm(4 * -0.3, 2.0)),
    (M.truncated_normal(1.0, 1.0), 0.5, stats.truncnorm(-np.inf, 0.5, loc=0.5)),
    (M.truncated_normal(2.0, 0.0), 0.25, stats.truncnorm(-np.inf, -0.5, loc=1.0, scale=2.0)),
    (M.gamma(2.0), 1.5, stats.gamma(2.0, scale=1 / 1.5)),
    (M.gamma(0.5), 0.3, stats.gamma(0.5, scale=1 / 0.3)),
    (M.truncated_gamma(0.5, 2.0), 1.0, None),
    (M.truncated_gamma(3.0, 0.5), 2.0, None),
    (M.inverse_gaussian(1.0), 0.5, stats.invgauss(1.0, scale=1.0)),  # mu = sqrt(lambda / (2 theta'))
    (M.inverse_gaussian(4.0), 2.0, stats.invgauss(1.0 / 4.0, scale=4.0)),
]


@pytest.mark.parametrize("model, theta, ref", CASES, ids=lambda v: getattr(v, "name", None))
def test_normalised(model, theta, ref):
    lo, hi = model.support.interval
    r = N.integrate(log_dens(model, theta), lo, hi, tol=1e-13)
    assert r.value == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("model, theta, ref", [c for c in CASES if c[2] is not None],
                         ids=lambda v: getattr(v, "name", None))
def test_density_matches_scipy(model, theta, ref):
    lo, hi = model.support.interval
    lo = max(lo, ref.ppf(1e-6))
    hi = min(hi, ref.ppf(1 - 1e-6))
    xs = np.linspace(lo, hi, 23)[1:-1]
    np.testing.assert_allclose(M.log_density(model, theta, xs), ref.logpdf(xs), rtol=1e-10, atol=1e-10)


def test_truncated_gamma_density_matches_scipy():
    model = M.truncated_gamma(0.5, 2.0)
    ref = stats.gamma(0.5, scale=1.0)
    xs = np.array([2.1, 3.0, 5.0, 10.0])
    expected = ref.logpdf(xs) - ref.logsf(2.0)
    np.testing.assert_allclose(M.log_density(model, 1.0, xs), expected, rtol=1e-11)


@pytest.mark.parametrize("model, theta, ref", CASES, ids=lambda v: getattr(v, "name", None))
def test_sampler_mean_and_distribution(model, theta, ref):
    n = 200_000
    x = M.sample(model, theta, n, 123)
    assert x.shape == (n,)
    assert np.all(model.support.contains(x))
    mean = model.mean_fn(theta)
    assert abs(x.mean() - mean) <= 4 * x.std() / math.sqrt(n)
    if ref is not None:
        assert stats.kstest(x[:20000], ref.cdf).pvalue > 1e-4


def test_mean_is_partition_slope():
    for model, theta, _ in CASES:
        h = 1e-6
        slope = (model.log_partition(theta + h) - model.log_partition(theta - h)) / (2 * h)
        assert model.support.sign * slope == pytest.approx(model.mean_fn(theta), rel=1e-6, abs=1e-8)


def test_sampler_deterministic_per_seed():
    m = M.truncated_normal(1.0, -2.0)
    np.testing.assert_array_equal(M.sample(m, 1.0, 1000, 5), M.sample(m, 1.0, 1000, 5))
    assert not np.array_equal(M.sample(m, 1.0, 1000, 5), M.sample(m, 1.0, 1000, 6))


def test_deep_tail_samplers():
    # acceptance of naive rejection would be ~1e-9 here
    x = M.standard_normal_tail(6.0, 50_000, np.random.default_rng(0))
    assert x.min() > 6.0
    ref = stats.truncnorm(6.0, np.inf)
    assert stats.kstest(x, ref.cdf).pvalue > 1e-4
    g = M.standard_gamma_tail(2.0, 30.0, 50_000, np.random.default_rng(1))
    assert g.min() > 30.0
    tail = stats.gamma(2.0)
    assert stats.kstest(g, lambda v: 1 - tail.sf(v) / tail.sf(30.0)).pvalue > 1e-4


def test_log_density_rejects_outside_support():
    with pytest.raises(DomainError):
        M.log_density(M.gamma(2.0), 1.0, -1.0)
    with pytest.raises(DomainError):
        M.log_density(M.truncated_normal(1.0, 0.0), 1.0, 0.5)
    with pytest.raises(DomainError):
        M.log_density(M.gamma(2.0), -1.0, 1.0)


@given(st.floats(min_value=-2, max_value=2), st.floats(min_value=-2, max_value=2), st.floats(min_value=-5, max_value=5))
def test_tilt_reparametrises(theta, theta0, x):
    base = M.normal()
    tilted = M.tilt(base, theta0)
    assert M.log_density(tilted, theta - theta0, x) == pytest.approx(M.log_density(base, theta, x), abs=1e-10)


@given(st.floats(min_value=0.6, max_value=3), st.floats(min_value=-0.5, max_value=0.5), st.floats(min_value=0.01, max_value=20))
def test_tilt_generic_family(theta, theta0, x):
    base = M.gamma(2.0)
    tilted = M.tilt(base, theta0)
    assert tilted.family == ("tilted" if theta0 else "gamma")
    assert M.log_density(tilted, theta - theta0, x) == pytest.approx(M.log_density(base, theta, x), abs=1e-10)


@given(st.floats(min_value=0.1, max_value=3), st.floats(min_value=-20, max_value=-0.01))
def test_reflect(theta, y):
    base = M.gamma(2.0)
    r = M.reflect(base)
    assert r.support.orientation == M.LOWER
    assert M.log_density(r, theta, y) == pytest.approx(M.log_density(base, theta, -y), abs=1e-12)


def test_generic_truncation():
    base = M.inverse_gaussian(1.0)
    t = M.truncate(base, 0.5)
    assert t.family == "truncated"
    lo, hi = t.support.interval
    assert (lo, hi) == (0.5, math.inf)
    r = N.integrate(log_dens(t, 1.0), lo, hi)
    assert r.value == pytest.approx(1.0, abs=1e-10)
    x = M.sample(t, 1.0, 100_000, 3)
    assert x.min() > 0.5
    assert abs(x.mean() - t.mean_fn(1.0)) < 4 * x.std() / math.sqrt(x.size)


def test_truncate_dispatches_to_families():
    assert M.truncate(M.normal(), 0.0).family == "truncnormal"
    assert M.truncate(M.gamma(2.0), 1.0).family == "truncgamma"
    with pytest.raises(DomainError):
        M.truncate(M.truncate(M.normal(), 0.0), -1.0)


def test_truncation_bound_must_lie_inside():
    with pytest.raises(DomainError):
        M.truncated_gamma(2.0, -1.0)


@pytest.mark.parametrize("model, n, theta", [(M.normal(), 4, 0.3), (M.gamma(1.5), 5, 2.0), (M.inverse_gaussian(2.0), 3, 0.7)])
def test_sufficient_reduction_law_of_sum(model, n, theta):
    reduced = M.sufficient_reduction(model, n)
    draws = model.sample(theta, 50_000 * n, 9).reshape(-1, n).sum(axis=1)
    assert abs(draws.mean() - reduced.mean_fn(theta)) < 4 * draws.std() / math.sqrt(draws.size)
    lo, hi = reduced.support.interval
    assert N.integrate(log_dens(reduced, theta), lo, hi).value == pytest.approx(1.0, abs=1e-10)


def test_sufficient_reduction_unsupported():
    with pytest.raises(DomainError):
        M.sufficient_reduction(M.truncated_normal(1.0, 0.0), 3)


@pytest.mark.parametrize("text, name", [
    ("normal", "normal"),
    ("normal:sigma=2", "normal:sigma=2"),
    ("gamma:alpha=2", "gamma:alpha=2"),
    ("gamma:alpha=2,trunc_lo=1", "gamma:alpha=2,trunc_lo=1"),
    ("invgauss:lambda=1", "invgauss:lambda=1"),
    ("truncnormal:sigma=1,b=0", "truncnormal:sigma=1,b=0"),
])
def test_parse_model(text, name):
    assert M.parse_model(text).name == name


@pytest.mark.parametrize("text, needle", [
    ("gauss", "'gauss'"),
    ("gamma", "'alpha'"),
    ("gamma:alpha=x", "'alpha'"),
    ("normal:mu=1", "'mu'"),
    ("truncnormal:sigma=1", "'b'"),
])
def test_parse_model_errors(text, needle):
    with pytest.raises(ParseError, match=needle):
        M.parse_model(text)


def test_parameter_helpers():
    assert M.normal_theta(3.0, 2.0) == pytest.approx(0.75)
    assert M.inverse_gaussian_theta(1.0, 1.0) == pytest.approx(0.5)
