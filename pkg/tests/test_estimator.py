import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special, stats

from cases import all_closed_form_cases, relative_gap
from cmest import estimator as E
from cmest import models as M
from cmest import qfunc as Q
from cmest.errors import DomainError
from cmest.estimator import EstimatorSpec, LocationShift, SignFlip, Truncation

RECIP = Q.reciprocal()
SQRT_HALF_PI = math.sqrt(math.pi / 2)
MILLS_1 = 0.65567954241879847154   # mpmath, 40 digits
TRUNC_AT_MINUS_1 = 1.4106861346424479977
IG_AT_1 = 1.3113590848375969431


def scipy_generic(model, q, x):
    """Independent oracle: scipy.quad of the defining integral."""
    s = model.support.sign
    edge = model.support.edge
    d1, d2 = q.support
    upper = min((edge - x) * s, d2)
    log_hx = float(model.log_h(x))
    f = lambda u: math.exp(float(model.log_h(x + s * u)) - log_hx + float(q.log_f(u)))
    val, _ = integrate.quad(f, d1, upper, epsabs=1e-13, epsrel=1e-12, limit=400)
    return val


# ---- documented examples -------------------------------------------------

def test_normal_examples():
    assert E.estimate(M.normal(), RECIP, 0.0).value == pytest.approx(SQRT_HALF_PI, rel=1e-15)
    assert E.estimate(M.normal(), RECIP, 1.0).value == pytest.approx(MILLS_1, rel=1e-14)
    assert E.estimate(M.normal(), Q.shifted_power(0.0, 2.0), 0.0).value == pytest.approx(1.0, rel=1e-15)
    assert E.estimate(M.normal(), Q.shifted_power(0.0, 2.0), 1.0).value == pytest.approx(0.34432045758120152846, rel=1e-13)


def test_generic_examples_by_quadrature():
    g = E.estimate_generic(M.normal(), RECIP, 1.0)
    assert g.method == "quadrature"
    assert g.value == pytest.approx(MILLS_1, rel=1e-12)
    assert g.quadrature_error_bound < 1e-10


def test_location_examples():
    assert E.estimate_location(M.normal(), 0.0, -1.0).value == pytest.approx(MILLS_1, rel=1e-14)
    assert E.estimate_location(M.normal(), 0.4, 0.4).value == pytest.approx(SQRT_HALF_PI, rel=1e-14)
    for x in (-2.0, 0.3, 5.0):
        assert E.estimate_location(M.gamma(2.0), x=abs(x), theta0=0.0).value == E.estimate(M.gamma(2.0), RECIP, abs(x)).value
        assert E.estimate_location(M.normal(), x, 0.0) == E.estimate(M.normal(), RECIP, x)


def test_location_equals_survival_over_density():
    # change of location: Fbar_{theta0}(x) / f_{theta0}(x)
    for theta0, x in [(-1.0, 0.0), (0.5, 2.0), (2.0, -1.0)]:
        ref = stats.norm(theta0).sf(x) / stats.norm(theta0).pdf(x)
        assert E.estimate_location(M.normal(), x, theta0).value == pytest.approx(ref, rel=1e-12)


def test_signflip_examples():
    assert E.estimate_signflip(M.gamma(2.0), 3.0).value == 1.5
    assert E.estimate_signflip(M.gamma(1.0), 2.0).value == 2.0
    assert E.estimate_signflip(M.inverse_gaussian(1.0), 1.0).value == pytest.approx(IG_AT_1, rel=1e-14)
    with pytest.raises(DomainError):
        E.estimate_signflip(M.normal(), 1.0)


def test_ig_closed_form_against_defining_integral():
    # (1/h(x)) int_0^x h(s) ds with h(s) = s^{-3/2} exp(-1/(2s)), x = 1
    mpmath.mp.dps = 30
    val = mpmath.quad(lambda s: s ** -1.5 * mpmath.exp(-1 / (2 * s)), [0, 1]) / mpmath.exp(-0.5)
    assert float(val) == pytest.approx(IG_AT_1, rel=1e-14)


def test_truncated_examples():
    assert E.estimate_truncated(M.truncated_gamma(2.0, 1.0), 2.0).value == pytest.approx(0.75, rel=1e-15)
    assert E.estimate_truncated(M.truncated_normal(1.0, 0.0), -1.0).value == pytest.approx(TRUNC_AT_MINUS_1, rel=1e-14)
    near = E.estimate_truncated(M.truncated_normal(1.0, 0.0), -1e-12).value
    assert 0 < near < 1e-11
    assert E.estimate_truncated(M.truncated_gamma(2.0, 1.0), 1.0 + 1e-12).value < 1e-11
    with pytest.raises(DomainError):
        E.estimate_truncated(M.truncated_normal(1.0, 0.0), 0.5)
    with pytest.raises(DomainError):
        E.estimate_truncated(M.normal(), 0.5)


# ---- closed forms versus quadrature ---------------------------------------

@pytest.mark.parametrize("model, q, xs", all_closed_form_cases(), ids=lambda v: getattr(v, "name", None))
def test_closed_form_matches_quadrature(model, q, xs):
    closed, tag, _ = E.evaluate(model, q, xs, "closed")
    quad, method, bound = E.evaluate(model, q, xs, "quadrature")
    assert tag.startswith("closed-form")
    assert method == "quadrature"
    assert np.all(relative_gap(closed, quad) <= 1e-8)


@pytest.mark.parametrize("model, q, x", [
    (M.normal(), RECIP, -3.0), (M.normal(), RECIP, 2.5), (M.gamma(2.0), RECIP, 0.7),
    (M.inverse_gaussian(1.0), RECIP, 0.4), (M.truncated_normal(1.0, 0.0), RECIP, -2.0),
    (M.gamma(2.0), Q.shifted_power(1.0, 1.5), 2.0), (M.inverse_gaussian(2.0), Q.power(2.0), 1.3),
    (M.tilt(M.gamma(2.0), -0.5), RECIP, 1.0), (M.normal(), Q.window(0.5, 2.0), -1.0),
])
def test_quadrature_matches_scipy_oracle(model, q, x):
    ours = E.estimate(model, q, x, "quadrature").value
    assert ours == pytest.approx(scipy_generic(model, q, x), rel=1e-9)


def test_log_evaluate_deep_tail():
    # closed forms overflow long before their logs do
    lv, sgn = E.log_evaluate(M.normal(), RECIP, np.array([-60.0, -1e3]))
    np.testing.assert_allclose(lv, [1800 + math.log(math.sqrt(2 * math.pi)), 5e5 + math.log(math.sqrt(2 * math.pi))],
                               rtol=1e-12)
    lv, _ = E.log_evaluate(M.normal(), Q.window(0.0, 1.0), np.array([-1e3]))
    assert lv[0] == pytest.approx(1000 - 0.5 - math.log(1000) + 0.5 * math.log(2 * math.pi) - math.log(2 * math.pi) / 2,
                                  abs=1e-2)


@pytest.mark.parametrize("model, q", [(M.normal(), RECIP), (M.normal(), Q.shifted_power(0.0, 2.0)),
                                      (M.normal(), Q.window(0.0, 1.0)), (M.truncated_normal(1.0, 0.0), RECIP),
                                      (M.gamma(2.0), Q.power(2.0)), (M.inverse_gaussian(1.0), RECIP)])
def test_log_evaluate_agrees_with_values(model, q):
    lo, hi = model.support.interval
    xs = np.linspace(max(lo, -10.0), min(hi, 10.0), 23)[1:-1]
    vals, _, _ = E.evaluate(model, q, xs)
    lv, sgn = E.log_evaluate(model, q, xs)
    np.testing.assert_allclose(sgn * np.exp(lv), vals, rtol=1e-12)


# ---- transform identities --------------------------------------------------

@pytest.mark.parametrize("model", [M.gamma(2.0), M.gamma(0.5), M.inverse_gaussian(1.0)], ids=lambda m: m.name)
@pytest.mark.parametrize("q", [RECIP, Q.power(2.0)], ids=lambda q: q.name)
def test_signflip_duality(model, q):
    refl = M.reflect(model)
    for x in (0.05, 0.7, 2.0, 9.0):
        flip = E.estimate_signflip(model, x, q, method="quadrature").value
        gen = E.estimate_generic(refl, q, -x).value
        assert flip == pytest.approx(gen, rel=1e-10, abs=1e-10)
        # delta_2 = -(that): unbiased for -q(theta') written with theta = -theta'
        assert -flip == pytest.approx(-gen, rel=1e-10, abs=1e-10)


def test_truncation_limit():
    # b covering 1 - 1e-6 of the base normal mass; the gap is sf(b)/pdf(x), so
    # the tolerance is relative
    b = stats.norm.isf(1e-6)
    for x in (-3.0, -1.0, 0.0, 1.0, 2.0):
        full = E.estimate(M.normal(), RECIP, x).value
        trunc = E.estimate_truncated(M.truncated_normal(1.0, b), x).value
        assert trunc == pytest.approx(full, rel=1e-4)
    b = stats.gamma(2.0).ppf(1e-6)
    for x in (0.5, 1.0, 5.0):
        assert E.estimate_truncated(M.truncated_gamma(2.0, b), x).value == pytest.approx(x / 2.0, rel=1e-4)


def test_spec_chain_resolution():
    spec = EstimatorSpec(M.normal(), RECIP, (LocationShift(0.5), SignFlip()))
    assert spec.transform_id == "shift=0.5;flip"
    assert spec.shift == 0.5
    assert spec.resolved_model.support.orientation == M.UPPER
    assert spec.target(1.5) == 1.0
    # flipped observation of x is -x in resolved coordinates
    assert spec.estimate(0.3).value == pytest.approx(E.estimate(spec.resolved_model, RECIP, -0.3).value)
    trunc = EstimatorSpec(M.gamma(2.0), RECIP, (Truncation(1.0),))
    assert trunc.resolved_model.family == "truncgamma"
    assert trunc.closed_form_tag == "truncgamma"
    assert EstimatorSpec(M.gamma(2.0), RECIP).transform_id == "identity"


def test_flipped_normal_matches_tail_ratio():
    # law of -X with X ~ N(theta, 1): Phi(-y)/phi(y) at y is the lower-tail ratio
    spec = EstimatorSpec(M.normal(), RECIP, (SignFlip(),))
    for y in (-2.0, 0.0, 1.5):
        assert spec.evaluate(np.array([y]))[0][0] == pytest.approx(special.ndtr(y) / stats.norm.pdf(y), rel=1e-10)


# ---- properties ------------------------------------------------------------

POSITIVE_CASES = [(M.normal(), -30.0, 30.0), (M.gamma(2.0), 1e-6, 80.0), (M.inverse_gaussian(1.5), 1e-3, 50.0),
                  (M.truncated_normal(1.0, 0.0), -20.0, -1e-9), (M.truncated_gamma(0.5, 2.0), 2.0 + 1e-9, 60.0)]


@pytest.mark.parametrize("model, lo, hi", POSITIVE_CASES, ids=lambda v: getattr(v, "name", None))
@pytest.mark.parametrize("q", [RECIP, Q.power(2.0), Q.shifted_power(1.0, 0.5), Q.window(0.0, 1.5)],
                         ids=lambda q: q.name)
@given(u=st.floats(min_value=0.0, max_value=1.0))
def test_positive_for_nonnegative_f(model, lo, hi, q, u):
    x = lo + u * (hi - lo)
    if not model.support.contains(x):
        return
    assert E.estimate(model, q, x).value >= 0.0


@given(st.lists(st.floats(min_value=-5, max_value=5), min_size=1, max_size=6),
       st.floats(min_value=-2, max_value=2), st.floats(min_value=0.1, max_value=3))
def test_mixture_linearity(xs, w1, w2):
    q = Q.mixture([(w1, RECIP), (w2, Q.window(0.0, 1.0))])
    xs = np.array(xs)
    a = E.evaluate(M.normal(), q, xs)[0]
    b = w1 * E.evaluate(M.normal(), RECIP, xs)[0] + w2 * E.evaluate(M.normal(), Q.window(0.0, 1.0), xs)[0]
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    c = E.evaluate(M.normal(), q, xs, "quadrature")[0]
    np.testing.assert_allclose(c, b, rtol=1e-8, atol=1e-10)


@given(st.floats(min_value=-6, max_value=6))
def test_normal_estimator_is_mills_ratio(x):
    assert E.estimate(M.normal(), RECIP, x).value == pytest.approx(SQRT_HALF_PI * special.erfcx(x / math.sqrt(2)),
                                                                  rel=1e-13)


def test_vectorised_matches_scalar():
    xs = np.linspace(0.1, 6, 9)
    vals = E.evaluate(M.gamma(2.0), Q.shifted_power(1.0, 1.5), xs)[0]
    for x, v in zip(xs, vals):
        assert E.estimate(M.gamma(2.0), Q.shifted_power(1.0, 1.5), x).value == pytest.approx(v, rel=1e-12)


def test_estimate_generic_requires_lower_orientation():
    with pytest.raises(DomainError):
        E.estimate_generic(M.gamma(2.0), RECIP, 1.0)


def test_outside_support_rejected():
    with pytest.raises(DomainError):
        E.estimate(M.gamma(2.0), RECIP, -1.0)
    with pytest.raises(DomainError):
        E.estimate(M.gamma(2.0), Q.shifted_power(1.0, 1.5), -1.0)


def test_method_flags():
    with pytest.raises(DomainError):
        E.estimate(M.gamma(2.0), Q.shifted_power(1.0, 1.5), 1.0, method="closed")
    with pytest.raises(ValueError):
        E.evaluate(M.gamma(2.0), RECIP, [1.0], method="magic")
    est = E.estimate(M.gamma(2.0), RECIP, 1.0, method="quadrature")
    assert est.method == "quadrature" and est.log_scale


# ---- ratio of means ----------------------------------------------------------

def test_ratio_independent_examples():
    assert E.estimate_ratio_independent([1.0, -1.0], [0.3], 1.0, 1.0) == 0.0
    assert E.estimate_ratio_independent([1.0], [0.0], 1.0, 1.0) == pytest.approx(SQRT_HALF_PI, rel=1e-15)
    with pytest.raises(DomainError):
        E.estimate_ratio_independent([], [1.0], 1.0, 1.0)
    with pytest.raises(DomainError):
        E.estimate_ratio_independent([1.0], [1.0], 1.0, 0.0)


@given(st.floats(min_value=-5, max_value=5), st.floats(min_value=-5, max_value=5),
       st.floats(min_value=0.2, max_value=3), st.floats(min_value=0.2, max_value=3))
def test_ratio_bivariate_reductions(y1, y2, s1, s2):
    independent = y1 / s2 * SQRT_HALF_PI * special.erfcx(y2 / s2 / math.sqrt(2))
    assert E.estimate_ratio_bivariate(y1, y2, s1, s2, 0.0) == pytest.approx(independent, rel=1e-12, abs=1e-300)
    rho = 0.6
    assert E.estimate_ratio_bivariate(rho * s1 / s2 * y2, y2, s1, s2, rho) == pytest.approx(rho * s1 / s2, rel=1e-12)


def test_ratio_bivariate_domain():
    with pytest.raises(DomainError):
        E.estimate_ratio_bivariate(1.0, 1.0, 1.0, 1.0, 1.5)
    with pytest.raises(DomainError):
        E.estimate_ratio_bivariate(1.0, 1.0, -1.0, 1.0, 0.0)
    np.testing.assert_allclose(E.estimate_ratio_bivariate(np.ones(3), np.zeros(3), 1.0, 1.0, 0.0), SQRT_HALF_PI)


def test_ratio_independent_monte_carlo():
    rng = np.random.default_rng(3)
    reps = 100_000
    z1 = rng.normal(2.0, 1.0, (reps, 25)).mean(axis=1)
    z2 = rng.normal(1.0, 1.0, (reps, 25)).mean(axis=1)
    v = E.ratio_independent_many(z1, z2, 25, 1.0)
    assert abs(v.mean() - 2.0) <= 4 * v.std(ddof=1) / math.sqrt(reps)
    # agrees with the sample-taking form
    assert E.estimate_ratio_independent(np.full(25, z1[0]), np.full(25, z2[0]), 1.0, 1.0) == pytest.approx(v[0])
