"""Completely monotone targets q(theta) given by their Laplace density.

A target is ``q(theta) = int_0^inf f(y) exp(-y theta) dy``. Only ``log|f|``
(and, for signed mixtures, the sign of f) is needed by the estimator; a
closed form for q is optional and used in preference to quadrature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import numerics
from .errors import DomainError, ParseError

INF = math.inf


@dataclass(frozen=True)
class QFunction:
    name: str
    log_f: Callable
    domain: tuple  # open interval C on which q is finite
    closed_q: Optional[Callable] = None
    support: tuple = (0.0, INF)  # f vanishes outside
    sign_f: Optional[Callable] = None  # None means f >= 0
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    components: tuple = ()  # ((weight, QFunction), ...) for mixtures

    @property
    def nonnegative(self) -> bool:
        return self.sign_f is None

    def in_domain(self, theta) -> bool:
        lo, hi = self.domain
        return lo < theta < hi

    def check_domain(self, theta):
        if not self.in_domain(theta):
            raise DomainError(f"theta={theta} outside the domain {self.domain} of q={self.name}")

    def split_point(self, theta) -> float:
        """Where to cut the Laplace integral into a finite and a tail piece."""
        k = self.params.get("k", 1.0)
        b = self.params.get("b", 0.0)
        rate = theta + b
        peak = k / rate if rate > 0 else 1.0
        return self.support[0] + max(1.0, peak)

    def __call__(self, theta):
        return eval_q(self, theta)


def _gamma_kernel(name, kind, b, k):
    if not k > 0:
        raise DomainError(f"k must be positive, got {k}")
    if not math.isfinite(b):
        raise DomainError(f"b must be finite, got {b}")
    lg = math.lgamma(k)

    def log_f(y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (k - 1.0) * np.log(y) - b * y - lg

    def closed(theta):
        return (b + theta) ** -k

    return QFunction(name, log_f, (0.0 - b, INF), closed, kind=kind, params={"b": b, "k": k})


def reciprocal() -> QFunction:
    return _gamma_kernel("recip", "reciprocal", 0.0, 1.0)


def power(k) -> QFunction:
    return _gamma_kernel(f"power:k={_fmt(k)}", "power", 0.0, float(k))


def shifted_power(b, k) -> QFunction:
    return _gamma_kernel(f"shiftpow:b={_fmt(b)},k={_fmt(k)}", "shifted_power", float(b), float(k))


def window(d1, d2) -> QFunction:
    """Indicator density on (d1, d2); q(theta) = (exp(-d1 theta) - exp(-d2 theta)) / theta."""
    d1, d2 = float(d1), float(d2)
    if not (0.0 <= d1 < d2):
        raise DomainError(f"window needs 0 <= d1 < d2, got d1={d1}, d2={d2}")

    def log_f(y):
        y = np.asarray(y, dtype=float)
        return np.where((y > d1) & (y < d2), 0.0, -np.inf)

    def closed(theta):
        if theta == 0.0:
            return d2 - d1
        if math.isinf(d2):
            return math.exp(-d1 * theta) / theta
        return math.exp(-d1 * theta) * -math.expm1(-(d2 - d1) * theta) / theta

    domain = (0.0, INF) if math.isinf(d2) else (-INF, INF)
    return QFunction(f"window:d1={_fmt(d1)},d2={_fmt(d2)}", log_f, domain, closed, (d1, d2),
                     kind="window", params={"d1": d1, "d2": d2})


def mixture(pairs) -> QFunction:
    """Linear combination ``sum w_i q_i``; f is the same combination of densities.

    Negative weights give a signed f; the result is then not guaranteed to
    be completely monotone.
    """
    pairs = tuple((float(w), q) for w, q in pairs)
    if not pairs:
        raise DomainError("mixture needs at least one component")
    lo = max(q.domain[0] for _, q in pairs)
    hi = min(q.domain[1] for _, q in pairs)
    s_lo = min(q.support[0] for _, q in pairs)
    s_hi = max(q.support[1] for _, q in pairs)
    signed = any(w < 0 for w, _ in pairs) or any(not q.nonnegative for _, q in pairs)

    def parts(y):
        y = np.asarray(y, dtype=float)
        logs = []
        signs = []
        for w, q in pairs:
            if w == 0:
                continue
            logs.append(q.log_f(y) + math.log(abs(w)))
            s = np.sign(w) * (1.0 if q.sign_f is None else q.sign_f(y))
            signs.append(np.broadcast_to(s, y.shape))
        logs = np.stack(logs)
        signs = np.stack(signs)
        top = np.max(logs, axis=0)
        safe = np.where(np.isfinite(top), top, 0.0)
        total = np.sum(signs * np.exp(logs - safe), axis=0)
        return total, safe, top

    def log_f(y):
        total, safe, top = parts(y)
        with np.errstate(divide="ignore"):
            return np.where(np.isfinite(top), np.log(np.abs(total)) + safe, -np.inf)

    def sign_f(y):
        return np.sign(parts(y)[0])

    closed = None
    if all(q.closed_q is not None for _, q in pairs):
        def closed(theta):
            return sum(w * q.closed_q(theta) for w, q in pairs)

    name = "mix:" + ";".join(f"{_fmt(w)}*{q.name}" for w, q in pairs)
    return QFunction(name, log_f, (lo, hi), closed, (s_lo, s_hi), sign_f if signed else None,
                     kind="mixture", components=pairs)


def custom(name, log_f, domain, closed_q=None, support=(0.0, INF), sign_f=None) -> QFunction:
    """Arbitrary Laplace density; the caller guarantees integrability on ``domain``."""
    return QFunction(name, log_f, tuple(domain), closed_q, tuple(support), sign_f)


def builtin_q(kind: str, **params) -> QFunction:
    if kind in ("reciprocal", "recip"):
        return reciprocal()
    if kind == "power":
        return power(params["k"])
    if kind in ("shifted_power", "shiftpow"):
        return shifted_power(params["b"], params["k"])
    if kind == "window":
        return window(params["d1"], params["d2"])
    raise DomainError(f"unknown q kind {kind!r}")


def eval_q_quadrature(q: QFunction, theta, tol=1e-10, rtol=1e-12) -> numerics.QuadResult:
    """``int f(y) exp(-y theta) dy`` by DE quadrature, split at ``q.split_point``."""
    q.check_domain(theta)
    if q.components:
        # per component, so jumps between pieces never fall inside one rule
        parts = [(w, eval_q_quadrature(c, theta, tol / len(q.components), rtol)) for w, c in q.components]
        value = sum(w * r.value for w, r in parts)
        with np.errstate(divide="ignore"):
            log_value = math.log(abs(value)) if value else -math.inf
        return numerics.QuadResult(value, sum(abs(w) * r.abs_error_bound for w, r in parts),
                                   sum(r.nodes_used for _, r in parts), all(r.converged for _, r in parts),
                                   log_value)
    lo, hi = q.support

    def integrand(y):
        return q.log_f(y) - y * theta

    sign = q.sign_f
    if math.isfinite(hi):
        return numerics.integrate(integrand, lo, hi, tol, rtol, sign)
    cut = q.split_point(theta)
    a = numerics.integrate(integrand, lo, cut, tol / 2, rtol, sign)
    b = numerics.integrate(integrand, cut, hi, tol / 2, rtol, sign)
    value = a.value + b.value
    with np.errstate(divide="ignore"):
        log_value = math.log(abs(value)) if value else -math.inf
    return numerics.QuadResult(value, a.abs_error_bound + b.abs_error_bound,
                               a.nodes_used + b.nodes_used, a.converged and b.converged, log_value)


def eval_q(q: QFunction, theta, tol=1e-10) -> float:
    q.check_domain(theta)
    if q.closed_q is not None:
        return float(q.closed_q(theta))
    res = eval_q_quadrature(q, theta, tol)
    numerics.warn_unconverged(np.array([res.converged]), np.array([res.abs_error_bound]), "q integral")
    return res.value


def check_complete_monotonicity(q: QFunction, thetas, orders=(1, 2, 3), rel_step=0.05, slack=1e-6):
    """Sign test of finite differences: (-1)^m Delta^m q >= -slack * |q|.

    Differences of a completely monotone function alternate in sign exactly
    for any step, so only rounding needs the slack. Returns a list of
    ``(theta, m, signed_difference, ok)``.
    """
    if not q.nonnegative:
        raise DomainError(f"{q.name} has a signed Laplace density; complete monotonicity is not implied")
    lo = q.domain[0]
    out = []
    for theta in thetas:
        q.check_domain(theta)
        gap = theta - lo if math.isfinite(lo) else max(1.0, abs(theta))
        for m in orders:
            step = rel_step * gap / m
            pts = [theta + j * step for j in range(m + 1)]
            vals = [eval_q(q, p) for p in pts]
            diff = sum((-1) ** (m - j) * math.comb(m, j) * v for j, v in enumerate(vals))
            signed = (-1) ** m * diff
            scale = max(abs(v) for v in vals)
            out.append((theta, m, signed, signed >= -slack * scale))
    return out


# --------------------------------------------------------------------------
# CLI grammar
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    v = float(v)
    if math.isinf(v):
        return "inf"
    return repr(v) if v != int(v) else str(int(v))


def _parse_params(text, allowed, what):
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if "=" not in item:
            raise ParseError(f"{what}: expected key=value, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        if key not in allowed:
            raise ParseError(f"{what}: unknown key {key!r} (allowed: {', '.join(allowed)})")
        try:
            out[key] = float(val)
        except ValueError:
            raise ParseError(f"{what}: key {key!r} has non-numeric value {val!r}") from None
    return out


def parse_q(text: str) -> QFunction:
    """Parse ``recip``, ``power:k=..``, ``shiftpow:b=..,k=..``, ``window:d1=..,d2=..``
    or ``mix:w1*<q>;w2*<q>``. A leading ``q=`` is accepted."""
    text = text.strip()
    if text.startswith("q="):
        text = text[2:]
    kind, _, rest = text.partition(":")
    if kind == "mix":
        pairs = []
        for part in rest.split(";"):
            w, star, sub = part.partition("*")
            if not star:
                raise ParseError(f"mix component {part!r} must look like <weight>*<q>")
            try:
                pairs.append((float(w), parse_q(sub)))
            except ValueError as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(f"mix weight {w!r} is not a number") from None
        return mixture(pairs)
    if kind in ("recip", "reciprocal"):
        _parse_params(rest, (), "recip")
        return reciprocal()
    if kind == "power":
        p = _parse_params(rest, ("k",), "power")
        if "k" not in p:
            raise ParseError("power: missing key 'k'")
        return power(p["k"])
    if kind == "shiftpow":
        p = _parse_params(rest, ("b", "k"), "shiftpow")
        for key in ("b", "k"):
            if key not in p:
                raise ParseError(f"shiftpow: missing key {key!r}")
        return shifted_power(p["b"], p["k"])
    if kind == "window":
        p = _parse_params(rest, ("d1", "d2"), "window")
        for key in ("d1", "d2"):
            if key not in p:
                raise ParseError(f"window: missing key {key!r}")
        return window(p["d1"], p["d2"])
    raise ParseError(f"unknown q kind {kind!r}")
