"""One-parameter continuous exponential families in natural form.

A model is ``h(x) exp(s * theta * x - A(theta))`` on an interval, where the
orientation sign ``s`` is +1 for supports of the form (-inf, a) and -1 for
(a', inf). With s = -1, theta is the positive "rate" (theta' for Gamma and
inverse Gaussian laws), so the parameter of interest is positive in both
orientations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import numerics
from .errors import DomainError, ParseError

INF = math.inf
LOWER = "lower-unbounded"
UPPER = "upper-unbounded"


@dataclass(frozen=True)
class Support:
    orientation: str
    endpoint: float
    truncation: Optional[float] = None

    def __post_init__(self):
        if self.orientation not in (LOWER, UPPER):
            raise ValueError(f"bad orientation {self.orientation!r}")
        b = self.truncation
        if b is not None:
            if not math.isfinite(b):
                raise DomainError("truncation bound must be finite")
            if self.orientation == LOWER and not b < self.endpoint:
                raise DomainError(f"truncation b={b} must lie below the endpoint {self.endpoint}")
            if self.orientation == UPPER and not b > self.endpoint:
                raise DomainError(f"truncation b={b} must lie above the endpoint {self.endpoint}")

    @property
    def sign(self) -> int:
        return 1 if self.orientation == LOWER else -1

    @property
    def interval(self) -> tuple:
        if self.orientation == LOWER:
            return (-INF, self.endpoint if self.truncation is None else self.truncation)
        return (self.endpoint if self.truncation is None else self.truncation, INF)

    @property
    def edge(self) -> float:
        """The finite-or-infinite end the estimator integrates towards."""
        lo, hi = self.interval
        return hi if self.orientation == LOWER else lo

    def contains(self, x):
        lo, hi = self.interval
        x = np.asarray(x, dtype=float)
        return (x > lo) & (x < hi)


@dataclass(frozen=True)
class ExpFamilyModel:
    name: str
    support: Support
    log_h: Callable
    log_partition: Callable
    theta_domain: tuple
    sampler: Callable  # (theta, n, rng) -> ndarray
    mean_fn: Optional[Callable] = None
    family: str = "custom"
    params: dict = field(default_factory=dict)
    # True when h has Gaussian tails towards the unbounded end; estimators
    # of q with unbounded Laplace support then have infinite variance.
    gaussian_tail: bool = False

    def check_theta(self, theta):
        lo, hi = self.theta_domain
        if not lo < theta < hi:
            raise DomainError(f"theta={theta} outside the parameter space {self.theta_domain} of {self.name}")

    def log_density(self, theta, x):
        return log_density(self, theta, x)

    def sample(self, theta, n, seed):
        return sample(self, theta, n, seed)


def log_density(model: ExpFamilyModel, theta, x):
    """``log h(x) + s*theta*x - A(theta)``; raises outside the support."""
    model.check_theta(theta)
    scalar = np.ndim(x) == 0
    xa = np.asarray(x, dtype=float)
    if not np.all(model.support.contains(xa)):
        raise DomainError(f"x outside the support {model.support.interval} of {model.name}")
    out = model.log_h(xa) + model.support.sign * theta * xa - model.log_partition(theta)
    return float(out) if scalar else out


def density(model, theta, x):
    return np.exp(log_density(model, theta, x))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample(model: ExpFamilyModel, theta, n, seed) -> np.ndarray:
    """n exact draws from the model at theta; deterministic given the seed."""
    model.check_theta(theta)
    n = int(n)
    if n < 1:
        raise DomainError("sample size must be at least 1")
    return np.asarray(model.sampler(theta, n, _rng(seed)), dtype=float)


# --------------------------------------------------------------------------
# exact samplers
# --------------------------------------------------------------------------

def _rejection_fill(n, draw):
    """Collect n accepted values from ``draw(m) -> accepted array``."""
    out = []
    have = 0
    m = n
    while have < n:
        acc = draw(max(m, 64))
        out.append(acc)
        have += acc.size
        m = int(1.2 * (n - have)) + 1
    return np.concatenate(out)[:n]


def standard_normal_tail(alpha0, n, rng):
    """Draws of Z | Z > alpha0 for standard normal Z, exact.

    Plain rejection when the tail holds a third of the mass or more;
    otherwise an exponential proposal with the optimal rate (Robert 1995).
    """
    if alpha0 < 0.45:
        return _rejection_fill(n, lambda m: (z := rng.standard_normal(m))[z > alpha0])
    lam = 0.5 * (alpha0 + math.sqrt(alpha0 * alpha0 + 4.0))

    def draw(m):
        z = alpha0 + rng.standard_exponential(m) / lam
        u = rng.random(m)
        return z[u <= np.exp(-0.5 * (z - lam) ** 2)]

    return _rejection_fill(n, draw)


def standard_gamma_tail(alpha, c, n, rng):
    """Draws of Y | Y > c for Y ~ Gamma(alpha, 1), exact rejection."""
    if c <= 0:
        return rng.standard_gamma(alpha, n)
    if numerics.upper_incomplete_gamma_regularized(alpha, c) >= 0.25 or (alpha > 1 and c <= alpha - 1):
        return _rejection_fill(n, lambda m: (y := rng.standard_gamma(alpha, m))[y > c])
    # c lies beyond the mode: propose c + Exp(lam) and thin
    lam = 1.0 - (alpha - 1.0) / c if alpha > 1 else 1.0

    def draw(m):
        e = rng.standard_exponential(m) / lam
        if alpha > 1:
            log_acc = (alpha - 1.0) * (np.log1p(e / c) - e / c)
        else:
            log_acc = (alpha - 1.0) * np.log1p(e / c)
        return (c + e)[np.log(rng.random(m)) <= log_acc]

    return _rejection_fill(n, draw)


def inverse_gaussian_draws(mu, lam, n, rng):
    """Michael, Schucany & Haas root-selection sampler."""
    y = rng.standard_normal(n) ** 2
    r = mu * y / (2.0 * lam)
    x1 = mu / (1.0 + r + np.sqrt(r * (2.0 + r)))  # smaller root, cancellation-free
    u = rng.random(n)
    return np.where(u <= mu / (mu + x1), x1, mu * mu / x1)


# --------------------------------------------------------------------------
# catalog
# --------------------------------------------------------------------------

def _fmt(v):
    v = float(v)
    return repr(v) if v != int(v) else str(int(v))


def normal(sigma=1.0) -> ExpFamilyModel:
    """N(sigma^2 theta, sigma^2) with h(y) = phi(y/sigma)/sigma, theta = mu/sigma^2.

    sigma = 1 is the N(theta, 1) model with h = phi.
    """
    sigma = float(sigma)
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    s2 = sigma * sigma
    log_sigma = math.log(sigma)

    def log_h(y):
        return -0.5 * (np.asarray(y) / sigma) ** 2 - numerics.LOG_SQRT_2PI - log_sigma

    name = "normal" if sigma == 1.0 else f"normal:sigma={_fmt(sigma)}"
    return ExpFamilyModel(
        name=name,
        support=Support(LOWER, INF),
        log_h=log_h,
        log_partition=lambda t: 0.5 * s2 * t * t,
        theta_domain=(-INF, INF),
        sampler=lambda t, n, rng: rng.normal(s2 * t, sigma, n),
        mean_fn=lambda t: s2 * t,
        family="normal",
        params={"sigma": sigma, "shift": 0.0},
        gaussian_tail=True,
    )


def normal_theta(mu, sigma=1.0) -> float:
    """Natural parameter of N(mu, sigma^2) in the ``normal(sigma)`` model."""
    return mu / sigma ** 2


def truncated_normal(sigma, b, shift=0.0) -> ExpFamilyModel:
    """N(sigma^2 theta, sigma^2) conditioned on T < b, in natural form.

    ``shift`` carries an accumulated exponential tilt so that tilting keeps
    the family (and its closed forms) intact.
    """
    sigma, b = float(sigma), float(b)
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    s2 = sigma * sigma
    log_sigma = math.log(sigma)

    def log_h(t):
        t = np.asarray(t, dtype=float)
        return -0.5 * (t / sigma) ** 2 - numerics.LOG_SQRT_2PI - log_sigma + shift * t

    def beta(t):
        return (b - s2 * (t + shift)) / sigma

    def log_partition(t):
        u = t + shift
        return 0.5 * s2 * u * u + numerics.log_std_normal_cdf(beta(t))

    def sampler(t, n, rng):
        z = standard_normal_tail(-beta(t), n, rng)
        return s2 * (t + shift) - sigma * z

    def mean(t):
        return s2 * (t + shift) - sigma / numerics.mills_ratio(-beta(t))

    name = f"truncnormal:sigma={_fmt(sigma)},b={_fmt(b)}"
    if shift:
        name += f"|shift={_fmt(shift)}"
    return ExpFamilyModel(name, Support(LOWER, INF, b), log_h, log_partition, (-INF, INF), sampler,
                          mean, "truncnormal", {"sigma": sigma, "b": b, "shift": shift}, True)


def gamma(alpha, trunc_lo=None) -> ExpFamilyModel:
    """Gamma(alpha, rate theta') with h(x) = x^(alpha-1) on (0, inf), rate form.

    With ``trunc_lo = b`` the law is conditioned on X > b.
    """
    if trunc_lo is not None:
        return truncated_gamma(alpha, trunc_lo)
    alpha = float(alpha)
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    lg = math.lgamma(alpha)

    def log_h(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return (alpha - 1.0) * np.log(x)

    return ExpFamilyModel(
        name=f"gamma:alpha={_fmt(alpha)}",
        support=Support(UPPER, 0.0),
        log_h=log_h,
        log_partition=lambda t: lg - alpha * math.log(t),
        theta_domain=(0.0, INF),
        sampler=lambda t, n, rng: rng.standard_gamma(alpha, n) / t,
        mean_fn=lambda t: alpha / t,
        family="gamma",
        params={"alpha": alpha},
    )


def truncated_gamma(alpha, b) -> ExpFamilyModel:
    alpha, b = float(alpha), float(b)
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    if not b > 0:
        raise DomainError(f"truncation point must be positive, got {b}")
    lg = math.lgamma(alpha)
    logq = numerics.log_upper_incomplete_gamma_regularized

    def log_h(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return (alpha - 1.0) * np.log(x)

    def log_partition(t):
        return lg - alpha * math.log(t) + logq(alpha, t * b)

    def mean(t):
        return alpha / t * math.exp(logq(alpha + 1.0, t * b) - logq(alpha, t * b))

    return ExpFamilyModel(
        name=f"gamma:alpha={_fmt(alpha)},trunc_lo={_fmt(b)}",
        support=Support(UPPER, 0.0, b),
        log_h=log_h,
        log_partition=log_partition,
        theta_domain=(0.0, INF),
        sampler=lambda t, n, rng: standard_gamma_tail(alpha, t * b, n, rng) / t,
        mean_fn=mean,
        family="truncgamma",
        params={"alpha": alpha, "b": b},
    )


def inverse_gaussian(lam) -> ExpFamilyModel:
    """IG(mu, lambda) with lambda known; rate-form parameter theta' = lambda / (2 mu^2).

    h(x) = x^(-3/2) exp(-lambda / 2x) on (0, inf).
    """
    lam = float(lam)
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    const = -0.5 * math.log(lam) + numerics.LOG_SQRT_2PI

    def log_h(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return -1.5 * np.log(x) - 0.5 * lam / x

    def mean(t):
        return math.sqrt(lam / (2.0 * t))

    return ExpFamilyModel(
        name=f"invgauss:lambda={_fmt(lam)}",
        support=Support(UPPER, 0.0),
        log_h=log_h,
        log_partition=lambda t: -math.sqrt(2.0 * lam * t) + const,
        theta_domain=(0.0, INF),
        sampler=lambda t, n, rng: inverse_gaussian_draws(mean(t), lam, n, rng),
        mean_fn=mean,
        family="invgauss",
        params={"lambda": lam},
    )


def inverse_gaussian_theta(mu, lam) -> float:
    return lam / (2.0 * mu * mu)


def catalog() -> dict:
    """Constructors of the built-in models keyed by grammar name."""
    return {
        "normal": normal,
        "gamma": gamma,
        "invgauss": inverse_gaussian,
        "truncnormal": truncated_normal,
    }


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------

def tilt(model: ExpFamilyModel, theta0) -> ExpFamilyModel:
    """Change of location in theta: base density ``h(x) exp(s theta0 x)``.

    The returned model is parametrised by ``theta - theta0``, so estimators
    built on it target ``q(theta - theta0)``.
    """
    theta0 = float(theta0)
    if theta0 == 0.0:
        return model
    if model.family == "normal":
        sigma = model.params["sigma"]
        shift = model.params["shift"] + theta0
        s2 = sigma * sigma
        log_sigma = math.log(sigma)
        c = s2 * shift

        def log_h(y):
            y = np.asarray(y, dtype=float)
            return -0.5 * ((y - c) / sigma) ** 2 - numerics.LOG_SQRT_2PI - log_sigma + 0.5 * s2 * shift ** 2

        return ExpFamilyModel(
            name=f"{model.name}|shift={_fmt(shift)}",
            support=model.support,
            log_h=log_h,
            log_partition=lambda t: 0.5 * s2 * (t + shift) ** 2,
            theta_domain=(-INF, INF),
            sampler=lambda t, n, rng: rng.normal(s2 * (t + shift), sigma, n),
            mean_fn=lambda t: s2 * (t + shift),
            family="normal",
            params={"sigma": sigma, "shift": shift},
            gaussian_tail=True,
        )
    if model.family == "truncnormal":
        p = model.params
        return truncated_normal(p["sigma"], p["b"], p["shift"] + theta0)
    s = model.support.sign
    base_log_h = model.log_h
    lo, hi = model.theta_domain
    mean = model.mean_fn
    return ExpFamilyModel(
        name=f"{model.name}|shift={_fmt(theta0)}",
        support=model.support,
        log_h=lambda x: base_log_h(x) + s * theta0 * np.asarray(x, dtype=float),
        log_partition=lambda t: model.log_partition(t + theta0),
        theta_domain=(lo - theta0, hi - theta0),
        sampler=lambda t, n, rng: model.sampler(t + theta0, n, rng),
        mean_fn=None if mean is None else (lambda t: mean(t + theta0)),
        family="tilted",
        params={"base": model, "theta0": theta0},
        gaussian_tail=model.gaussian_tail,
    )


def reflect(model: ExpFamilyModel) -> ExpFamilyModel:
    """Law of Y = -X: ``h~(y) = h(-y)``, orientation swapped, same parameter."""
    sup = model.support
    orient = UPPER if sup.orientation == LOWER else LOWER
    trunc = None if sup.truncation is None else -sup.truncation
    base_log_h = model.log_h
    mean = model.mean_fn
    return ExpFamilyModel(
        name=f"{model.name}|flip",
        support=Support(orient, -sup.endpoint, trunc),
        log_h=lambda y: base_log_h(-np.asarray(y, dtype=float)),
        log_partition=model.log_partition,
        theta_domain=model.theta_domain,
        sampler=lambda t, n, rng: -model.sampler(t, n, rng),
        mean_fn=None if mean is None else (lambda t: -mean(t)),
        family="reflected",
        params={"base": model},
        gaussian_tail=model.gaussian_tail,
    )


def log_prob_region(model: ExpFamilyModel, theta, lo, hi) -> float:
    """log P_theta(lo < X < hi) by quadrature of the density."""
    s = model.support.sign
    log_a = model.log_partition(theta)
    res = numerics.integrate(lambda x: model.log_h(x) + s * theta * x - log_a, lo, hi, tol=1e-14, rtol=1e-13)
    return res.log_value


def truncate(model: ExpFamilyModel, b) -> ExpFamilyModel:
    """Condition on X < b (lower orientation) or X > b (upper orientation)."""
    b = float(b)
    if model.support.truncation is not None:
        raise DomainError(f"{model.name} is already truncated")
    if model.family == "normal":
        return truncated_normal(model.params["sigma"], b, model.params["shift"])
    if model.family == "gamma":
        return truncated_gamma(model.params["alpha"], b)
    sup = Support(model.support.orientation, model.support.endpoint, b)
    lo, hi = sup.interval

    def log_partition(t):
        return model.log_partition(t) + log_prob_region(model, t, lo, hi)

    def sampler(t, n, rng):
        keep = math.exp(log_prob_region(model, t, lo, hi))
        if keep < 1e-3:
            raise DomainError(f"truncation keeps only {keep:.2e} of the mass; rejection sampling refused")
        return _rejection_fill(n, lambda m: (x := model.sampler(t, m, rng))[(x > lo) & (x < hi)])

    def mean(t):
        log_a = log_partition(t)
        s = sup.sign
        res = numerics.integrate(lambda x: np.log(np.abs(x)) + model.log_h(x) + s * t * x - log_a,
                                 lo, hi, tol=1e-13, sign=np.sign)
        return res.value

    side = "trunc_hi" if sup.orientation == LOWER else "trunc_lo"
    return ExpFamilyModel(f"{model.name}|{side}={_fmt(b)}", sup, model.log_h, log_partition,
                          model.theta_domain, sampler, mean, "truncated", {"base": model, "b": b},
                          model.gaussian_tail)


def sufficient_reduction(model: ExpFamilyModel, n: int) -> ExpFamilyModel:
    """Model of T = X_1 + ... + X_n for n i.i.d. draws at the same theta."""
    n = int(n)
    if n < 1:
        raise DomainError("need at least one observation")
    if n == 1:
        return model
    if model.family == "normal" and model.params["shift"] == 0.0:
        return normal(model.params["sigma"] * math.sqrt(n))
    if model.family == "gamma":
        return gamma(model.params["alpha"] * n)
    if model.family == "invgauss":
        return inverse_gaussian(model.params["lambda"] * n * n)
    raise DomainError(f"no sufficient-statistic reduction available for {model.name}")


# --------------------------------------------------------------------------
# CLI grammar
# --------------------------------------------------------------------------

_KEYS = {
    "normal": ("sigma",),
    "gamma": ("alpha", "trunc_lo"),
    "invgauss": ("lambda",),
    "truncnormal": ("sigma", "b"),
}


def parse_model(text: str) -> ExpFamilyModel:
    """``normal``, ``normal:sigma=v``, ``gamma:alpha=v[,trunc_lo=b]``,
    ``invgauss:lambda=v``, ``truncnormal:sigma=v,b=v``."""
    text = text.strip()
    kind, _, rest = text.partition(":")
    if kind not in _KEYS:
        raise ParseError(f"unknown model {kind!r} (known: {', '.join(_KEYS)})")
    params = {}
    if rest:
        for item in rest.split(","):
            if "=" not in item:
                raise ParseError(f"{kind}: expected key=value, got {item!r}")
            key, val = (s.strip() for s in item.split("=", 1))
            if key not in _KEYS[kind]:
                raise ParseError(f"{kind}: unknown key {key!r} (allowed: {', '.join(_KEYS[kind])})")
            try:
                params[key] = float(val)
            except ValueError:
                raise ParseError(f"{kind}: key {key!r} has non-numeric value {val!r}") from None
    if kind == "normal":
        return normal(params.get("sigma", 1.0))
    if kind == "gamma":
        if "alpha" not in params:
            raise ParseError("gamma: missing key 'alpha'")
        return gamma(params["alpha"], params.get("trunc_lo"))
    if kind == "invgauss":
        if "lambda" not in params:
            raise ParseError("invgauss: missing key 'lambda'")
        return inverse_gaussian(params["lambda"])
    for key in ("sigma", "b"):
        if key not in params:
            raise ParseError(f"truncnormal: missing key {key!r}")
    return truncated_normal(params["sigma"], params["b"])


def with_name(model: ExpFamilyModel, name: str) -> ExpFamilyModel:
    return replace(model, name=name)
