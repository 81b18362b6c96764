"""Special functions and double-exponential quadrature.

Everything here is vectorised over numpy arrays and returns a plain float
for scalar input. Integrands are supplied as *logarithms* so that very
large or very small integrands (ratios like ``h(s)/h(x)`` far in a tail)
never overflow before the final exponentiation.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, QuadratureWarning

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
SQRT_2PI = math.sqrt(2.0 * math.pi)
SQRT_HALF_PI = math.sqrt(0.5 * math.pi)

_EPS = np.finfo(float).eps
_TINY = 1e-300

# Mills ratio switches from the power series to the continued fraction here.
_MILLS_CF_FROM = 2.0
_SERIES_TERMS = 40


def _out(x, scalar):
    return float(x) if scalar else x


# --------------------------------------------------------------------------
# normal distribution
# --------------------------------------------------------------------------

def _half_square(x):
    """x**2 / 2 with the rounding error of the square split off.

    ``exp(-x*x/2)`` loses about ``x**2 * eps`` relative accuracy; writing
    x = hi + lo with hi on a 1/16 grid makes ``hi*hi`` exact.
    """
    hi = np.round(x * 16.0) / 16.0
    lo = x - hi
    return 0.5 * hi * hi, 0.5 * lo * (x + hi)


def std_normal_pdf(x):
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=float)
    a, b = _half_square(x)
    return _out(np.exp(-a) * np.exp(-b) / SQRT_2PI, scalar)


def std_normal_logpdf(x):
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=float)
    return _out(-0.5 * x * x - LOG_SQRT_2PI, scalar)


def _mills_series(x):
    # Phi(x) - 1/2 = phi(x) * sum x^(2n+1) / (2n+1)!!, all terms positive
    term = x.copy()
    total = x.copy()
    x2 = x * x
    for n in range(1, _SERIES_TERMS):
        term = term * x2 / (2 * n + 1)
        total = total + term
    a, b = _half_square(x)
    return SQRT_HALF_PI * np.exp(a) * np.exp(b) - total


def _mills_cf(x):
    # Legendre continued fraction for Gamma(1/2, z) e^z z^(-1/2), z = x^2/2,
    # evaluated with the modified Lentz scheme; Mills ratio = x * cf / 2.
    z = 0.5 * x * x
    b = z + 0.5
    c = np.full_like(x, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for i in range(1, 500):
        an = -i * (i - 0.5)
        b = b + 2.0
        d_new = an * d + b
        d_new = np.where(np.abs(d_new) < _TINY, _TINY, d_new)
        c_new = b + an / c
        c_new = np.where(np.abs(c_new) < _TINY, _TINY, c_new)
        d_new = 1.0 / d_new
        delta = d_new * c_new
        h = np.where(active, h * delta, h)
        d = np.where(active, d_new, d)
        c = np.where(active, c_new, c)
        active &= np.abs(delta - 1.0) > _EPS
        if not active.any():
            break
    return 0.5 * x * h


def _mills_nonneg(x):
    out = np.empty_like(x)
    small = x < _MILLS_CF_FROM
    if small.any():
        out[small] = _mills_series(x[small])
    big = ~small
    if big.any():
        xb = x[big]
        finite = np.isfinite(xb)
        vals = np.zeros_like(xb)
        if finite.any():
            vals[finite] = _mills_cf(xb[finite])
        out[big] = vals
    return out


def mills_ratio(x):
    """Mills ratio ``sf(x) / pdf(x)`` of the standard normal.

    Accurate to a few ulps on the whole line. For ``x < -37.5`` the true
    value exceeds the float range and ``inf`` is returned; use
    :func:`log_mills_ratio` there.
    """
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.full(x.shape, np.nan)
    ok = ~np.isnan(x)
    pos = ok & (x >= 0)
    neg = ok & (x < 0)
    if pos.any():
        out[pos] = _mills_nonneg(x[pos])
    if neg.any():
        xn = x[neg]
        a, b = _half_square(xn)
        with np.errstate(over="ignore"):
            direct = SQRT_2PI * np.exp(a) * np.exp(b)
        out[neg] = direct - _mills_nonneg(-xn)
    return _out(out[0] if scalar else out, scalar)


def std_normal_sf(x):
    """Upper tail probability of the standard normal."""
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ax = np.abs(x)
    with np.errstate(invalid="ignore"):
        tail = np.where(np.isinf(ax), 0.0, mills_ratio(ax) * std_normal_pdf(ax))
    out = np.where(x >= 0, tail, 1.0 - tail)
    out = np.where(np.isnan(x), np.nan, out)
    return _out(out[0] if scalar else out, scalar)


def std_normal_cdf(x):
    return std_normal_sf(-np.asarray(x, dtype=float)) if np.ndim(x) else std_normal_sf(-float(x))


def log_mills_ratio(x):
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    pos = x >= 0
    with np.errstate(divide="ignore"):
        out[pos] = np.log(mills_ratio(x[pos]))
    neg = ~pos
    if neg.any():
        xn = x[neg]
        out[neg] = 0.5 * xn * xn + LOG_SQRT_2PI + np.log1p(-std_normal_sf(-xn))
    return _out(out[0] if scalar else out, scalar)


def log_std_normal_sf(x):
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    pos = x >= 0
    with np.errstate(divide="ignore"):
        out[pos] = log_mills_ratio(x[pos]) - 0.5 * x[pos] ** 2 - LOG_SQRT_2PI
    neg = ~pos
    if neg.any():
        out[neg] = np.log1p(-std_normal_sf(-x[neg]))
    return _out(out[0] if scalar else out, scalar)


def log_std_normal_cdf(x):
    if np.ndim(x):
        return log_std_normal_sf(-np.asarray(x, dtype=float))
    return log_std_normal_sf(-float(x))


# --------------------------------------------------------------------------
# gamma functions
# --------------------------------------------------------------------------

_lgamma = np.vectorize(math.lgamma, otypes=[float])


def log_gamma(a):
    if np.ndim(a) == 0:
        if a <= 0:
            raise DomainError(f"log_gamma needs a > 0, got {a}")
        return math.lgamma(float(a))
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise DomainError("log_gamma needs a > 0")
    return _lgamma(a)


def _gamma_series(a, c):
    # sum_n c^n / (a (a+1) ... (a+n)), so P(a, c) = e^{-c} c^a / Gamma(a) * sum
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(10_000):
        ap += 1.0
        term *= c / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total
    raise ArithmeticError(f"incomplete gamma series failed for a={a}, c={c}")


def _gamma_cf(a, c):
    # Gamma(a, c) e^c c^(-a), modified Lentz
    b = c + 1.0 - a
    cc = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        cc = b + an / cc
        if abs(cc) < _TINY:
            cc = _TINY
        d = 1.0 / d
        delta = d * cc
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete gamma continued fraction failed for a={a}, c={c}")


def _log_q_scalar(a, c):
    if a <= 0 or c < 0 or math.isnan(c):
        raise DomainError(f"incomplete gamma needs a > 0, c >= 0 (got a={a}, c={c})")
    if c == 0:
        return 0.0
    if math.isinf(c):
        return -math.inf
    log_pref = -c + a * math.log(c) - math.lgamma(a)
    if c < a + 1.0:
        p = math.exp(log_pref) * _gamma_series(a, c)
        return math.log1p(-p) if p < 1.0 else -math.inf
    return log_pref + math.log(_gamma_cf(a, c))


_log_q_vec = np.vectorize(_log_q_scalar, otypes=[float])


def log_upper_incomplete_gamma_regularized(a, c):
    """log Q(a, c), finite far into the tail where Q itself underflows."""
    if np.ndim(a) == 0 and np.ndim(c) == 0:
        return _log_q_scalar(float(a), float(c))
    return _log_q_vec(a, c)


def upper_incomplete_gamma_regularized(a, c):
    """Q(a, c) = Gamma(a, c) / Gamma(a) for a > 0, c >= 0."""
    return np.exp(log_upper_incomplete_gamma_regularized(a, c)) if np.ndim(a) or np.ndim(c) \
        else math.exp(_log_q_scalar(float(a), float(c)))


def lower_incomplete_gamma_regularized(a, c):
    if np.ndim(a) == 0 and np.ndim(c) == 0:
        a, c = float(a), float(c)
        if c < a + 1.0:
            if c == 0:
                return 0.0
            return math.exp(-c + a * math.log(c) - math.lgamma(a)) * _gamma_series(a, c)
        return -math.expm1(_log_q_scalar(a, c))
    return -np.expm1(log_upper_incomplete_gamma_regularized(a, c))


# --------------------------------------------------------------------------
# double-exponential quadrature
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadResult:
    value: float
    abs_error_bound: float
    nodes_used: int
    converged: bool
    log_value: float = math.nan


@dataclass(frozen=True)
class BatchQuadResult:
    value: np.ndarray
    log_value: np.ndarray
    sign: np.ndarray
    abs_error_bound: np.ndarray
    converged: np.ndarray
    nodes_used: int


# half-widths in t beyond which nodes leave the float range
_T_MAX = {"ts": 6.1, "es": 6.78, "ss": 6.78}
_MIN_LEVEL = 3


def _level_t(kind, level):
    tmax = _T_MAX[kind]
    if level == 0:
        k = np.arange(-math.floor(tmax), math.floor(tmax) + 1, dtype=float)
        return k
    h = 2.0 ** -level
    m = math.floor((tmax / h - 1) / 2)
    odd = 2 * np.arange(-m - 1, m + 1, dtype=float) + 1
    return odd * h


def _map_nodes(kind, t):
    """Unit nodes for a DE rule.

    Returns ``(d_lo, d_hi, log_w)``. For ``ts`` the nodes lie in (0, 1) and
    both distances to the ends are returned accurately; for ``es`` the node
    lies in (0, inf) and ``d_hi`` is inf; for ``ss`` ``d_lo`` is the node on
    the whole line.
    """
    v = 0.5 * math.pi * np.sinh(t)
    log_dv = np.log(0.5 * math.pi * np.cosh(t))
    if kind == "ts":
        e = np.exp(-2.0 * np.abs(v))
        near = e / (1.0 + e)
        d_lo = np.where(t < 0, near, 1.0 - near)
        d_hi = np.where(t < 0, 1.0 - near, near)
        with np.errstate(divide="ignore"):
            log_w = np.log(2.0 * e) - 2.0 * np.log1p(e) + log_dv
        return d_lo, d_hi, log_w
    if kind == "es":
        return np.exp(v), np.full_like(v, np.inf), v + log_dv
    if kind == "ss":
        x = np.sinh(v)
        log_cosh = np.abs(v) + np.log1p(np.exp(-2.0 * np.abs(v))) - math.log(2.0)
        return x, np.full_like(v, np.inf), log_cosh + log_dv
    raise ValueError(kind)


def _de_core(kind, nrows, evaluate, tol, rtol, max_nodes):
    """Adaptive level-halving DE sum for ``nrows`` integrals at once.

    ``evaluate(d_lo, d_hi, rows)`` returns ``(log_f, sign)`` arrays of shape
    ``(len(rows), nodes)``; ``sign`` may be None for positive integrands.
    Sums are carried relative to a running per-row maximum of the log
    terms, so the integral is recovered as ``scaled * exp(shift)``.
    """
    shift = np.full(nrows, -np.inf)
    total = np.zeros(nrows)
    total_abs = np.zeros(nrows)
    prev = np.full(nrows, np.nan)
    err = np.full(nrows, np.inf)
    done = np.zeros(nrows, dtype=bool)
    used = 0
    level = 0
    while True:
        t = _level_t(kind, level)
        h = 2.0 ** -level
        used += t.size
        d_lo, d_hi, log_w = _map_nodes(kind, t)
        rows = np.flatnonzero(~done)
        log_f, sgn = evaluate(d_lo, d_hi, rows)
        with np.errstate(invalid="ignore"):
            terms = np.where(np.isnan(log_f), -np.inf, log_f + log_w)
        new_max = np.max(terms, axis=1) if terms.shape[1] else np.full(rows.size, -np.inf)
        old = shift[rows]
        top = np.maximum(old, new_max)
        with np.errstate(invalid="ignore"):
            rescale = np.where(np.isfinite(top), np.exp(old - top), 0.0)
            contrib = np.where(np.isfinite(top)[:, None], np.exp(terms - top[:, None]), 0.0)
        rescale = np.nan_to_num(rescale)
        signed = contrib if sgn is None else contrib * sgn
        total[rows] = total[rows] * rescale + signed.sum(axis=1)
        total_abs[rows] = total_abs[rows] * rescale + contrib.sum(axis=1)
        prev_rows = prev[rows] * rescale
        shift[rows] = top
        est = h * total[rows]
        if level > 0:
            err_rows = np.abs(est - prev_rows)
        else:
            err_rows = np.full(rows.size, np.inf)
        roundoff = 64.0 * _EPS * h * total_abs[rows]
        err_rows = np.maximum(err_rows, roundoff)
        err[rows] = err_rows
        prev[rows] = est
        with np.errstate(over="ignore", invalid="ignore"):
            abs_goal = np.where(np.isfinite(top), tol * np.exp(-top), np.inf)
        goal = np.maximum(abs_goal, rtol * np.abs(est))
        if level >= _MIN_LEVEL:
            done[rows] = err_rows <= goal
        if done.all() or used * 2 > max_nodes:
            break
        level += 1
    scaled = prev
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        log_value = np.log(np.abs(scaled)) + shift
        value = np.where(scaled == 0, 0.0, np.sign(scaled) * np.exp(log_value))
        bound = np.where(err == 0, 0.0, err * np.exp(shift))
    return value, log_value, np.sign(scaled), bound, done, used


def integrate(f_log, lo, hi, tol=1e-10, rtol=1e-12, sign=None, max_nodes=2 ** 15):
    """Integrate ``exp(f_log(x))`` (times ``sign(x)`` if given) over (lo, hi).

    Finite intervals use tanh-sinh, half-lines exp-sinh and the whole line
    sinh-sinh. Nodes are placed so that points close to a finite endpoint
    are exact offsets from it, which keeps singularities such as ``x**-0.5``
    at a finite ``lo`` harmless. Near a finite ``hi`` the integrand only
    sees the rounded point, so a singularity there costs about 1e-8
    relative accuracy; :func:`integrate_batch` passes the exact distance. The step is halved until successive estimates
    differ by less than ``max(tol, rtol*|value|)``.
    """
    lo = float(lo)
    hi = float(hi)
    if lo == hi:
        return QuadResult(0.0, 0.0, 0, True, -math.inf)
    if lo > hi:
        r = integrate(f_log, hi, lo, tol, rtol, sign, max_nodes)
        return QuadResult(-r.value, r.abs_error_bound, r.nodes_used, r.converged, r.log_value)

    if math.isfinite(lo) and math.isfinite(hi):
        kind = "ts"
        width = hi - lo
        log_jac = math.log(width)

        def place(d_lo, d_hi):
            return np.where(d_lo <= 0.5, lo + width * d_lo, hi - width * d_hi)
    elif math.isfinite(lo):
        kind, log_jac = "es", 0.0

        def place(d_lo, d_hi):
            return lo + d_lo
    elif math.isfinite(hi):
        kind, log_jac = "es", 0.0

        def place(d_lo, d_hi):
            return hi - d_lo
    else:
        kind, log_jac = "ss", 0.0

        def place(d_lo, d_hi):
            return d_lo

    def evaluate(d_lo, d_hi, rows):
        x = place(d_lo, d_hi)
        # nodes that round onto an endpoint are dropped; the integrand never sees them
        at_end = (x == lo) | (x == hi)
        if at_end.any():
            x = np.where(at_end, x[np.argmin(np.abs(d_lo - 0.5))], x)
        with np.errstate(all="ignore"):
            lf = np.asarray(f_log(x), dtype=float) + log_jac
        lf = np.where(at_end, -np.inf, lf)
        s = None if sign is None else np.asarray(sign(x), dtype=float)[None, :]
        return lf[None, :], s

    value, log_value, _, bound, done, used = _de_core(kind, 1, evaluate, tol, rtol, max_nodes)
    return QuadResult(float(value[0]), float(bound[0]), used, bool(done[0]), float(log_value[0]))


def integrate_batch(log_integrand, lengths, tol=1e-10, rtol=1e-12, sign=None, max_nodes=2 ** 15):
    """Integrate many integrands over (0, L_i) with a shared node set.

    ``log_integrand(u, uc, rows)`` receives node matrices of shape
    ``(len(rows), m)``: ``u`` is the distance from 0 and ``uc = L - u`` the
    distance from the far end (accurate on its own half of the interval,
    inf for infinite L). ``rows`` indexes the integrals still being refined.
    ``sign`` follows the same call convention.
    """
    lengths = np.asarray(lengths, dtype=float)
    n = lengths.size
    value = np.zeros(n)
    log_value = np.full(n, -np.inf)
    sgn_out = np.zeros(n)
    bound = np.zeros(n)
    conv = np.ones(n, dtype=bool)
    used_total = 0
    if np.any(lengths < 0) or np.any(np.isnan(lengths)):
        raise DomainError("integration lengths must be non-negative")
    for kind, mask in (("ts", np.isfinite(lengths) & (lengths > 0)), ("es", np.isinf(lengths))):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        L = lengths[idx]

        def evaluate(d_lo, d_hi, rows, L=L, idx=idx, kind=kind):
            if kind == "ts":
                Lr = L[rows][:, None]
                u = Lr * d_lo[None, :]
                uc = Lr * d_hi[None, :]
                extra = np.log(Lr)
            else:
                u = np.broadcast_to(d_lo[None, :], (rows.size, d_lo.size))
                uc = np.full_like(u, np.inf)
                extra = 0.0
            with np.errstate(all="ignore"):
                lf = log_integrand(u, uc, idx[rows]) + extra
            s = None if sign is None else sign(u, uc, idx[rows])
            return lf, s

        v, lv, sg, b, d, used = _de_core(kind, idx.size, evaluate, tol, rtol, max_nodes)
        value[idx], log_value[idx], sgn_out[idx], bound[idx], conv[idx] = v, lv, sg, b, d
        used_total += used
    return BatchQuadResult(value, log_value, sgn_out, bound, conv, used_total)


def warn_unconverged(converged, bound, what="integral"):
    n_bad = int(np.size(converged) - np.count_nonzero(converged))
    if n_bad:
        worst = float(np.max(np.asarray(bound)[~np.asarray(converged)]))
        warnings.warn(
            f"{n_bad} {what}(s) did not reach tolerance; worst error bound {worst:.3g}",
            QuadratureWarning,
            stacklevel=3,
        )
