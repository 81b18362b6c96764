"""Unbiased estimators of q(theta) for exponential-family models.

For a model in lower orientation (support (-inf, a)) the estimator is

    delta(x) = (1 / h(x)) * int_x^a h(s) f(s - x) ds,

and for upper orientation (support (a', inf)) the mirrored

    delta(x) = (1 / h(x)) * int_a'^x h(s) f(x - s) ds,

which is minus the sign-flip estimator and is unbiased for q(theta') with
theta' the rate. Both are evaluated as ``int_0^L exp(log h(x +/- u) -
log h(x) + log f(u)) du`` so nothing overflows before the last step.
Closed forms replace the integral whenever the model/q pair has one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from . import numerics
from .errors import DomainError
from .models import LOWER, UPPER, ExpFamilyModel, reflect, tilt, truncate
from .numerics import log_mills_ratio, mills_ratio
from .qfunc import QFunction, reciprocal

DEFAULT_TOL = 1e-10
DEFAULT_RTOL = 1e-12
_CHUNK = 1024


@dataclass(frozen=True)
class Estimate:
    value: float
    method: str
    quadrature_error_bound: Optional[float] = None
    log_scale: bool = False


# --------------------------------------------------------------------------
# closed forms
# --------------------------------------------------------------------------

def _log_normal_segment(z, lo, hi):
    """Log of ``[sf(z + lo) - sf(z + hi)] / pdf(z)`` for 0 <= lo <= hi <= inf.

    Right of ``-hi`` the difference of upper tails is used; left of it the
    same quantity as a difference of lower tails, so every Mills ratio is
    taken at a non-negative argument there and nothing overflows.
    """
    z, lo, hi = np.broadcast_arrays(np.asarray(z, float), np.asarray(lo, float), np.asarray(hi, float))
    fin = np.isfinite(hi)
    hi_f = np.where(fin, hi, 0.0)
    left = fin & (z + hi_f < 0)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        # upper-tail form: sf(z+a)/pdf(z) = M(z+a) exp(-a z - a^2/2)
        u1 = log_mills_ratio(np.where(left, 0.0, z + lo)) - lo * z - 0.5 * lo * lo
        u2 = np.where(fin, log_mills_ratio(np.where(left, 0.0, z + hi_f)) - hi_f * z - 0.5 * hi_f * hi_f, -np.inf)
        upper = u1 + np.log(-np.expm1(u2 - u1))
        # lower-tail form: cdf(z+a)/pdf(z) = M(-z-a) exp(-a z - a^2/2)
        m1 = log_mills_ratio(np.where(left, -z - hi_f, 0.0)) - hi_f * z - 0.5 * hi_f * hi_f
        m2 = log_mills_ratio(np.where(left, -z - lo, 0.0)) - lo * z - 0.5 * lo * lo
        lower = m1 + np.log(-np.expm1(m2 - m1))
    out = np.where(left, lower, upper)
    return np.where(hi > lo, out, -np.inf)


def _normal_segment(z, lo, hi):
    with np.errstate(over="ignore"):
        return np.exp(_log_normal_segment(z, lo, hi))


def _gamma_kernel_params(q):
    if q.kind in ("reciprocal", "power", "shifted_power"):
        return q.params["b"], q.params["k"]
    return None


def closed_form(model: ExpFamilyModel, q: QFunction):
    """Return ``(tag, fn)`` with ``fn`` vectorised over x, or None."""
    if q.kind == "mixture":
        parts = [(w, closed_form(model, sub)) for w, sub in q.components]
        if any(p is None for _, p in parts):
            return None
        tags = "+".join(p[0] for _, p in parts)

        def mix(x):
            return sum(w * p[1](x) for w, p in parts)

        return f"mixture({tags})", mix

    fam = model.family
    p = model.params
    kern = _gamma_kernel_params(q)

    if fam == "normal":
        sigma, shift = p["sigma"], p["shift"]
        s2 = sigma * sigma
        if kern is not None and kern[1] in (1.0, 2.0):
            b, k = kern
            c = s2 * (shift - b)
            if k == 1.0:
                tag = "normal-mills" if (b == 0 and shift == 0) else "normal-mills-shifted"
                return tag, lambda x: sigma * mills_ratio((np.asarray(x, float) - c) / sigma)

            def k2(x):
                z = (np.asarray(x, float) - c) / sigma
                return s2 * (1.0 - z * mills_ratio(z))

            return "normal-shiftpow-k2", k2
        if q.kind == "window":
            d1, d2 = q.params["d1"], q.params["d2"]
            c = s2 * shift
            return "normal-window", lambda x: sigma * _normal_segment(
                (np.asarray(x, float) - c) / sigma, d1 / sigma, d2 / sigma)
        return None

    if fam == "truncnormal":
        sigma, bt, shift = p["sigma"], p["b"], p["shift"]
        s2 = sigma * sigma
        if kern is not None and kern[1] in (1.0, 2.0):
            b, k = kern
            c = s2 * (shift - b)

            def seg(x):
                z = (np.asarray(x, float) - c) / sigma
                zb = (bt - c) / sigma
                return z, zb, _normal_segment(z, 0.0, zb - z)

            if k == 1.0:
                return "truncnormal-mills", lambda x: sigma * seg(x)[2]

            def k2(x):
                z, zb, d = seg(x)
                with np.errstate(over="ignore"):
                    return s2 * (-np.expm1(0.5 * (z - zb) * (z + zb)) - z * d)

            return "truncnormal-shiftpow-k2", k2
        if q.kind == "window":
            d1, d2 = q.params["d1"], q.params["d2"]
            c = s2 * shift

            def win(x):
                z = (np.asarray(x, float) - c) / sigma
                zb = (bt - c) / sigma
                return sigma * _normal_segment(z, d1 / sigma, np.minimum(d2 / sigma, zb - z))

            return "truncnormal-window", win
        return None

    if fam == "gamma" and kern is not None and kern[0] == 0.0:
        alpha = p["alpha"]
        k = kern[1]
        log_ratio = math.lgamma(alpha) - math.lgamma(alpha + k)
        if k == 1.0:
            return "gamma-x-over-alpha", lambda x: np.asarray(x, float) / alpha
        return "gamma-power", lambda x: np.asarray(x, float) ** k * math.exp(log_ratio)

    if fam == "truncgamma" and kern == (0.0, 1.0):
        alpha, bt = p["alpha"], p["b"]

        def tg(x):
            x = np.asarray(x, float)
            return (x - bt * (bt / x) ** (alpha - 1.0)) / alpha

        return "truncgamma", tg

    if fam == "invgauss" and kern == (0.0, 1.0):
        lam = p["lambda"]

        def ig(x):
            x = np.asarray(x, float)
            w = np.sqrt(lam / x)
            return 2.0 * x / w * mills_ratio(w)

        return "invgauss-chi2", ig

    return None


# --------------------------------------------------------------------------
# quadrature
# --------------------------------------------------------------------------

def quadrature_values(model: ExpFamilyModel, q: QFunction, xs, tol=DEFAULT_TOL, rtol=DEFAULT_RTOL):
    """Generic estimator by DE quadrature for an array of observations.

    Returns a :class:`numerics.BatchQuadResult`. The integral runs over the
    overlap of (0, L) -- L being the distance from x to the end of the
    support -- and the support (d1, d2) of f. Each half of a finite range is
    parametrised from its own end so singular behaviour of f at 0 or of h
    at a finite endpoint is resolved exactly.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    if not np.all(model.support.contains(xs)):
        raise DomainError(f"observation outside the support {model.support.interval} of {model.name}")
    if q.components:
        # the estimator is linear in f
        parts = [(w, quadrature_values(model, c, xs, tol / len(q.components), rtol)) for w, c in q.components]
        value = sum(w * r.value for w, r in parts)
        with np.errstate(divide="ignore"):
            log_value = np.log(np.abs(value))
        return numerics.BatchQuadResult(value, log_value, np.sign(value),
                                        sum(abs(w) * r.abs_error_bound for w, r in parts),
                                        np.logical_and.reduce([r.converged for _, r in parts]),
                                        sum(r.nodes_used for _, r in parts))
    s = model.support.sign
    edge = model.support.edge
    d1, d2 = q.support
    L = (edge - xs) * s if math.isfinite(edge) else np.full(xs.shape, np.inf)
    far = np.minimum(L, d2)
    edge_limited = L <= d2
    lengths = np.maximum(far - d1, 0.0)
    log_hx = model.log_h(xs)
    if not np.all(np.isfinite(log_hx)):
        raise DomainError("h vanishes at an observation; the estimator is undefined there")

    def pieces(v, vc, rows):
        x = xs[rows][:, None]
        half = (lengths[rows] / 2.0)[:, None]
        near = v <= half
        u = np.where(near, d1 + v, far[rows][:, None] - vc)
        from_x = x + s * u
        if math.isfinite(edge):
            from_edge = np.where(edge_limited[rows][:, None], edge - s * vc, from_x)
        else:
            from_edge = from_x
        point = np.where(near, from_x, from_edge)
        return u, point

    def log_integrand(v, vc, rows):
        u, point = pieces(v, vc, rows)
        return model.log_h(point) - log_hx[rows][:, None] + q.log_f(u)

    sign = None
    if q.sign_f is not None:
        def sign(v, vc, rows):
            return q.sign_f(pieces(v, vc, rows)[0])

    chunks = []
    for start in range(0, xs.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        idx = np.arange(xs.size)[sl]

        def li(v, vc, rows, idx=idx):
            return log_integrand(v, vc, idx[rows])

        sg = None if sign is None else (lambda v, vc, rows, idx=idx: sign(v, vc, idx[rows]))
        chunks.append(numerics.integrate_batch(li, lengths[sl], tol, rtol, sg))
    return numerics.BatchQuadResult(
        value=np.concatenate([c.value for c in chunks]),
        log_value=np.concatenate([c.log_value for c in chunks]),
        sign=np.concatenate([c.sign for c in chunks]),
        abs_error_bound=np.concatenate([c.abs_error_bound for c in chunks]),
        converged=np.concatenate([c.converged for c in chunks]),
        nodes_used=max(c.nodes_used for c in chunks),
    )


# --------------------------------------------------------------------------
# evaluation entry points
# --------------------------------------------------------------------------

def evaluate(model: ExpFamilyModel, q: QFunction, xs, method="auto", tol=DEFAULT_TOL):
    """Vectorised estimator values.

    Returns ``(values, method_tag, error_bounds)``; ``error_bounds`` is None
    for closed forms.
    """
    xs = np.asarray(xs, dtype=float)
    if method not in ("auto", "closed", "quadrature"):
        raise ValueError(f"unknown method {method!r}")
    if method != "quadrature":
        cf = closed_form(model, q)
        if cf is not None:
            if not np.all(model.support.contains(xs)):
                raise DomainError(f"observation outside the support {model.support.interval} of {model.name}")
            tag, fn = cf
            return np.asarray(fn(xs), dtype=float), f"closed-form:{tag}", None
        if method == "closed":
            raise DomainError(f"no closed form for {model.name} with q={q.name}")
    res = quadrature_values(model, q, xs, tol)
    numerics.warn_unconverged(res.converged, res.abs_error_bound, "estimator integral")
    return res.value.reshape(xs.shape), "quadrature", res.abs_error_bound.reshape(xs.shape)


def _log_closed_form(model, q):
    """Log-space versions of the closed forms that overflow in the far tail."""
    p = model.params
    fam = model.family
    kern = _gamma_kernel_params(q)
    if fam in ("normal", "truncnormal"):
        sigma = p["sigma"]
        log_sigma = math.log(sigma)
        s2 = sigma * sigma
        if q.kind == "window":
            d1, d2 = q.params["d1"], q.params["d2"]
            c = s2 * p["shift"]

            def log_win(x):
                z = (np.asarray(x, float) - c) / sigma
                hi = d2 / sigma if fam == "normal" else np.minimum(d2 / sigma, (p["b"] - c) / sigma - z)
                return log_sigma + _log_normal_segment(z, d1 / sigma, hi)

            return log_win
        if kern is None:
            return None
        c = s2 * (p["shift"] - kern[0])
        if fam == "normal" and kern[1] == 1.0:
            return lambda x: log_sigma + log_mills_ratio((np.asarray(x, float) - c) / sigma)
        if fam == "normal" and kern[1] == 2.0:
            def log_k2(x):
                z = (np.asarray(x, float) - c) / sigma
                with np.errstate(divide="ignore", invalid="ignore"):
                    neg = np.logaddexp(0.0, np.log(np.abs(z)) + log_mills_ratio(z))
                    pos = np.log(1.0 - z * mills_ratio(z))
                return 2 * log_sigma + np.where(z < 0, neg, pos)

            return log_k2
        if fam == "truncnormal" and kern[1] == 1.0:
            def log_seg(x):
                z = (np.asarray(x, float) - c) / sigma
                return log_sigma + _log_normal_segment(z, 0.0, (p["b"] - c) / sigma - z)

            return log_seg
        return None
    if fam == "gamma" and kern is not None and kern[0] == 0.0:
        alpha, k = p["alpha"], kern[1]
        log_ratio = math.lgamma(alpha) - math.lgamma(alpha + k)
        return lambda x: k * np.log(np.asarray(x, float)) + log_ratio
    if fam == "invgauss" and kern == (0.0, 1.0):
        lam = p["lambda"]

        def log_ig(x):
            x = np.asarray(x, float)
            w = np.sqrt(lam / x)
            return math.log(2.0) + np.log(x) - np.log(w) + log_mills_ratio(w)

        return log_ig
    return None


def log_evaluate(model: ExpFamilyModel, q: QFunction, xs, method="auto", tol=DEFAULT_TOL):
    """``(log|delta|, sign)`` at each observation, avoiding overflow where possible."""
    xs = np.asarray(xs, dtype=float)
    if method != "quadrature" and closed_form(model, q) is not None:
        log_fn = _log_closed_form(model, q)
        if log_fn is not None:
            if not np.all(model.support.contains(xs)):
                raise DomainError(f"observation outside the support {model.support.interval} of {model.name}")
            return log_fn(xs), np.ones_like(xs)
        values = evaluate(model, q, xs, method, tol)[0]
        with np.errstate(divide="ignore"):
            return np.log(np.abs(values)), np.sign(values)
    if method == "closed":
        raise DomainError(f"no closed form for {model.name} with q={q.name}")
    res = quadrature_values(model, q, xs, tol)
    numerics.warn_unconverged(res.converged, res.abs_error_bound, "estimator integral")
    return res.log_value.reshape(xs.shape), res.sign.reshape(xs.shape)


def estimate(model: ExpFamilyModel, q: QFunction, x, method="auto", tol=DEFAULT_TOL) -> Estimate:
    x = float(x)
    values, tag, bounds = evaluate(model, q, np.array([x]), method, tol)
    if bounds is None:
        return Estimate(float(values[0]), tag, None, False)
    return Estimate(float(values[0]), tag, float(bounds[0]), True)


def estimate_generic(model: ExpFamilyModel, q: QFunction, x, tol=DEFAULT_TOL) -> Estimate:
    """Quadrature form of the estimator for a lower-oriented model."""
    if model.support.orientation != LOWER:
        raise DomainError(f"{model.name} has support (a', inf); use estimate_signflip")
    return estimate(model, q, x, "quadrature", tol)


def estimate_location(model: ExpFamilyModel, x, theta0, q: QFunction = None, method="auto",
                      tol=DEFAULT_TOL) -> Estimate:
    """Estimator of q(theta - theta0) built on the tilted base ``h(x) exp(theta0 x)``."""
    return estimate(tilt(model, theta0), q or reciprocal(), x, method, tol)


def estimate_signflip(model_upper: ExpFamilyModel, x, q: QFunction = None, method="auto",
                      tol=DEFAULT_TOL) -> Estimate:
    """Estimator of q(theta') for a model on (a', inf) with density h(x) exp(-theta' x - A).

    For the reciprocal this is F_0(x) / f_0(x), i.e. minus the sign-flip
    estimator of 1/theta with theta = -theta' < 0.
    """
    if model_upper.support.orientation != UPPER:
        raise DomainError(f"{model_upper.name} is not supported on (a', inf)")
    return estimate(model_upper, q or reciprocal(), x, method, tol)


def estimate_truncated(model_trunc: ExpFamilyModel, x, q: QFunction = None, method="auto",
                       tol=DEFAULT_TOL) -> Estimate:
    if model_trunc.support.truncation is None:
        raise DomainError(f"{model_trunc.name} is not truncated")
    return estimate(model_trunc, q or reciprocal(), x, method, tol)


def estimate_ratio_independent(z1, z2, tau1, tau2) -> float:
    """Unbiased estimator of mu1/mu2 (mu2 > 0) from two independent normal samples."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z1.size == 0 or z2.size == 0:
        raise DomainError("both samples must be non-empty")
    if not (tau1 > 0 and tau2 > 0):
        raise DomainError("tau1 and tau2 must be positive")
    scale = math.sqrt(z2.size) / tau2
    zbar1 = float(z1.mean())
    if zbar1 == 0.0:
        return 0.0
    return scale * zbar1 * float(mills_ratio(scale * float(z2.mean())))


def ratio_independent_many(zbar1, zbar2, n2, tau2):
    """Vectorised form taking sample means directly."""
    scale = math.sqrt(n2) / tau2
    return scale * np.asarray(zbar1, float) * mills_ratio(scale * np.asarray(zbar2, float))


def estimate_ratio_bivariate(y1, y2, sigma1, sigma2, rho):
    """Unbiased estimator of mu1/mu2 (mu2 > 0) from one bivariate normal draw.

    Vectorised over ``y1``, ``y2``.
    """
    if not (sigma1 > 0 and sigma2 > 0):
        raise DomainError("sigma1 and sigma2 must be positive")
    if not abs(rho) <= 1:
        raise DomainError(f"|rho| must be at most 1, got {rho}")
    slope = rho * sigma1 / sigma2
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    w = y1 - slope * y2
    out = w / sigma2 * mills_ratio(y2 / sigma2) + slope
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# transform chains
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LocationShift:
    theta0: float

    def __str__(self):
        return f"shift={self.theta0:g}"


@dataclass(frozen=True)
class SignFlip:
    def __str__(self):
        return "flip"


@dataclass(frozen=True)
class Truncation:
    b: float

    def __str__(self):
        return f"trunc={self.b:g}"


@dataclass(frozen=True)
class EstimatorSpec:
    """A model, a target and a chain of transforms applied left to right.

    Parameters of the resolved model are ``theta - sum(theta0)``; flipped
    observations are negated. ``target(theta)`` is expressed in the base
    model's parameter.
    """
    model: ExpFamilyModel
    q: QFunction
    transforms: tuple = ()
    method: str = "auto"
    tol: float = DEFAULT_TOL

    @cached_property
    def _resolved(self):
        m = self.model
        shift = 0.0
        for t in self.transforms:
            if isinstance(t, LocationShift):
                m = tilt(m, t.theta0)
                shift += t.theta0
            elif isinstance(t, SignFlip):
                m = reflect(m)
            elif isinstance(t, Truncation):
                m = truncate(m, t.b)
            else:
                raise TypeError(f"unknown transform {t!r}")
        return m, shift

    @property
    def resolved_model(self) -> ExpFamilyModel:
        return self._resolved[0]

    @property
    def shift(self) -> float:
        return self._resolved[1]

    @property
    def flips(self) -> int:
        return sum(isinstance(t, SignFlip) for t in self.transforms)

    @property
    def transform_id(self) -> str:
        return ";".join(str(t) for t in self.transforms) or "identity"

    @property
    def closed_form_tag(self):
        cf = closed_form(self.resolved_model, self.q)
        return None if cf is None else cf[0]

    def resolved_theta(self, theta):
        return theta - self.shift

    def target(self, theta):
        return self.q(self.resolved_theta(theta))

    def observe(self, x):
        """Map base-model observations into the resolved model's coordinates."""
        x = np.asarray(x, dtype=float)
        return -x if self.flips % 2 else x

    def evaluate(self, xs, method=None, tol=None):
        """Estimator values at observations already in resolved coordinates."""
        return evaluate(self.resolved_model, self.q, xs, method or self.method, tol or self.tol)

    def log_evaluate(self, xs, method=None, tol=None):
        return log_evaluate(self.resolved_model, self.q, xs, method or self.method, tol or self.tol)

    def estimate(self, x, method=None, tol=None) -> Estimate:
        return estimate(self.resolved_model, self.q, float(self.observe(x)), method or self.method,
                        tol or self.tol)
