"""Monte Carlo certification of unbiasedness and the divergence demonstration."""
from __future__ import annotations

import json
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import numerics
from .errors import DomainError, QuadratureWarning
from .estimator import EstimatorSpec, LocationShift, SignFlip, Truncation
from .models import LOWER, ExpFamilyModel, log_prob_region
from .numerics import log_mills_ratio, log_std_normal_sf, mills_ratio
from .qfunc import QFunction, eval_q

REPORT_VERSION = "1.0"
DEFAULT_Z_MAX = 4.0
DEFAULT_BATCHES = 100
MIN_N = 10_000


class InfiniteVarianceWarning(RuntimeWarning):
    """The estimator has no second moment, so a z-score is not meaningful."""


def infinite_variance(model: ExpFamilyModel, q: QFunction) -> bool:
    """True when the estimator's variance is known to diverge.

    With Gaussian tails towards the open end, delta grows like
    exp(x^2/2) there unless f has bounded support.
    """
    return bool(model.gaussian_tail) and math.isinf(q.support[1])


@dataclass
class McReport:
    model_id: str
    q_id: str
    transform_id: str
    theta: float
    n: int
    seed: int
    sample_mean: Optional[float] = None
    std_error: Optional[float] = None
    target: Optional[float] = None
    z_score: Optional[float] = None
    passed: bool = False
    wall_time_ms: Optional[int] = None
    method: str = "z"
    mom: Optional[float] = None
    bracket_lo: Optional[float] = None
    bracket_hi: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = {("pass" if k == "passed" else k): _jsonable(v) for k, v in asdict(self).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "McReport":
        d = dict(d)
        d["passed"] = d.pop("pass")
        return cls(**d)

    def summary_line(self) -> str:
        status = "PASS" if self.passed else ("ERROR" if self.error else "FAIL")
        head = f"{status} {self.model_id} q={self.q_id} [{self.transform_id}] theta={self.theta:g}"
        if self.error:
            return f"{head}: {self.error}"
        if self.method == "mom":
            return (f"{head} mom={self.mom:.6g} in [{self.bracket_lo:.6g}, {self.bracket_hi:.6g}]"
                    f" target={self.target:.6g} (mean={self.sample_mean:.6g})")
        return f"{head} mean={self.sample_mean:.6g} se={self.std_error:.3g} target={self.target:.6g} z={self.z_score:+.2f}"


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _batch_sizes(n, batches):
    base, extra = divmod(n, batches)
    return [base + (i < extra) for i in range(batches)]


def _draw_values(spec: EstimatorSpec, phi, n, seed, batches):
    """Estimator values in batches, each batch with its own spawned seed."""
    model = spec.resolved_model
    children = np.random.SeedSequence(seed).spawn(batches)
    values = []
    for size, child in zip(_batch_sizes(n, batches), children):
        x = model.sample(phi, size, np.random.default_rng(child))
        values.append(spec.evaluate(x)[0])
    return values


def _tail_quantile(model: ExpFamilyModel, theta, p):
    """Point c with probability p beyond it on the side away from the support edge."""
    lower = model.support.orientation == LOWER
    lo_end, hi_end = model.support.interval
    start = model.mean_fn(theta) if model.mean_fn else 0.0
    target = math.log(p)

    def excess(c):
        if lower:
            return log_prob_region(model, theta, lo_end, c) - target
        return log_prob_region(model, theta, c, hi_end) - target

    step = 1.0
    outer = start - step if lower else start + step
    while excess(outer) > 0:
        step *= 2.0
        outer = start - step if lower else start + step
    return _bisect(excess, outer, start, iters=80)


def mom_bracket(spec: EstimatorSpec, phi, batch_size, width=DEFAULT_Z_MAX):
    """Interval that should contain the median of batch means.

    Cut the far tail at c, where a batch expects 10 draws beyond it. With
    delta >= 0 each batch mean is at least the batch mean of
    ``delta * 1{X inside c}``, whose mean m_c and standard deviation s_c
    follow from quadrature; the lower end is ``m_c - width * s_c /
    sqrt(batch)``. Right skew keeps the median below the mean, and the
    upper end is ``q + width * s_c / sqrt(batch)``.
    """
    if not spec.q.nonnegative:
        raise DomainError("median-of-means bracket needs a nonnegative Laplace density")
    model = spec.resolved_model
    p = min(0.5, 10.0 / batch_size)
    c = _tail_quantile(model, phi, p)
    s = model.support.sign
    log_a = model.log_partition(phi)

    def log_dens(x):
        return model.log_h(x) + s * phi * x - log_a

    def log_delta(x):
        return spec.log_evaluate(x)[0]

    lo, hi = (c, model.support.edge) if model.support.orientation == LOWER else (model.support.edge, c)
    mid = model.mean_fn(phi) if model.mean_fn else 0.5 * (lo + hi)
    cuts = [lo, mid, hi] if lo < mid < hi else [lo, hi]

    def piecewise(f_log):
        return sum(numerics.integrate(f_log, a, b, tol=1e-12).value for a, b in zip(cuts[:-1], cuts[1:]))

    m_c = piecewise(lambda x: log_delta(x) + log_dens(x))
    second = piecewise(lambda x: 2.0 * log_delta(x) + log_dens(x))
    s_c = math.sqrt(max(second - m_c * m_c, 0.0))
    half = width * s_c / math.sqrt(batch_size)
    return m_c - half, eval_q(spec.q, phi) + half


def _as_spec(model, q, transform):
    if isinstance(model, EstimatorSpec):
        return model
    return EstimatorSpec(model, q, tuple(transform or ()))


def certify(model, q=None, transform=(), theta=1.0, n=10 ** 6, seed=0, z_max=DEFAULT_Z_MAX,
            method="auto", batches=DEFAULT_BATCHES, timing=False) -> McReport:
    """Draw n samples at theta and compare the estimator mean with q.

    ``model`` may also be an :class:`EstimatorSpec` (then ``q`` and
    ``transform`` are ignored). ``theta`` is the base model's parameter; the
    target is ``q(theta - total shift)``. ``method`` is ``"z"``, ``"mom"``
    or ``"auto"`` (median-of-means exactly when the variance is infinite).
    Batches use seeds spawned from ``seed``, so the report depends only on
    the arguments.
    """
    t0 = time.perf_counter()
    spec = _as_spec(model, q, transform)
    n = int(n)
    if n < MIN_N:
        raise DomainError(f"n must be at least {MIN_N}, got {n}")
    if method not in ("auto", "z", "mom"):
        raise DomainError(f"unknown certification method {method!r}")
    phi = spec.resolved_theta(theta)
    spec.resolved_model.check_theta(phi)
    spec.q.check_domain(phi)
    heavy = infinite_variance(spec.resolved_model, spec.q)
    if method == "auto":
        method = "mom" if heavy else "z"
    elif method == "z" and heavy:
        warnings.warn(f"{spec.resolved_model.name} with q={spec.q.name} has infinite variance; "
                      "the z-score is unreliable", InfiniteVarianceWarning, stacklevel=2)

    chunks = _draw_values(spec, phi, n, seed, batches)
    values = np.concatenate(chunks)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n))
    target = eval_q(spec.q, phi)
    z = (mean - target) / se if se > 0 else (0.0 if mean == target else math.inf)
    report = McReport(spec.model.name, spec.q.name, spec.transform_id, float(theta), n, int(seed),
                      mean, se, float(target), float(z), method=method)
    if method == "mom":
        report.mom = float(np.median([c.mean() for c in chunks]))
        lo, hi = mom_bracket(spec, phi, n // batches, z_max)
        report.bracket_lo, report.bracket_hi = float(lo), float(hi)
        report.passed = bool(lo <= report.mom <= hi)
    else:
        report.passed = bool(abs(z) <= z_max)
    if timing:
        report.wall_time_ms = int(round(1000 * (time.perf_counter() - t0)))
    return report


def certify_grid(spec: EstimatorSpec, theta_grid, n=10 ** 6, base_seed=0, z_max=DEFAULT_Z_MAX,
                 method="auto", timing=False) -> list:
    """One report per theta, seeded ``base_seed + index``; errors are recorded, not raised."""
    grid = list(theta_grid)
    if not grid:
        raise DomainError("theta grid is empty")
    out = []
    for i, theta in enumerate(grid):
        seed = base_seed + i
        try:
            out.append(certify(spec, theta=theta, n=n, seed=seed, z_max=z_max, method=method, timing=timing))
        except (DomainError, ValueError, ArithmeticError) as exc:
            out.append(McReport(spec.model.name, spec.q.name, spec.transform_id, float(theta), int(n), seed,
                                passed=False, method=method, error=str(exc)))
    return out


def summarize(reports) -> dict:
    n_pass = sum(r.passed for r in reports)
    return {"pass": n_pass, "fail": len(reports) - n_pass}


def exit_code(reports) -> int:
    if any(r.error for r in reports):
        return 2
    return 0 if all(r.passed for r in reports) else 1


# --------------------------------------------------------------------------
# JSON persistence
# --------------------------------------------------------------------------

_NUM = {"type": ["number", "null"]}

CAMPAIGN_SCHEMA = {
    "type": "object",
    "required": ["version", "timestamp", "reports", "summary"],
    "properties": {
        "version": {"type": "string"},
        "timestamp": {"type": ["string", "null"]},
        "summary": {
            "type": "object",
            "required": ["pass", "fail"],
            "properties": {"pass": {"type": "integer", "minimum": 0}, "fail": {"type": "integer", "minimum": 0}},
        },
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["model_id", "q_id", "transform_id", "theta", "n", "seed", "sample_mean",
                             "std_error", "target", "z_score", "pass", "wall_time_ms"],
                "properties": {
                    "model_id": {"type": "string"},
                    "q_id": {"type": "string"},
                    "transform_id": {"type": "string"},
                    "theta": {"type": "number"},
                    "n": {"type": "integer"},
                    "seed": {"type": "integer"},
                    "sample_mean": _NUM,
                    "std_error": _NUM,
                    "target": _NUM,
                    "z_score": _NUM,
                    "pass": {"type": "boolean"},
                    "wall_time_ms": {"type": ["integer", "null"]},
                    "method": {"type": "string"},
                    "mom": _NUM,
                    "bracket_lo": _NUM,
                    "bracket_hi": _NUM,
                    "error": {"type": ["string", "null"]},
                },
            },
        },
    },
}


def report_timestamp() -> Optional[str]:
    """UTC time from SOURCE_DATE_EPOCH, or None; wall-clock time would break byte-identical reports."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def campaign_document(reports) -> dict:
    return {
        "version": REPORT_VERSION,
        "timestamp": report_timestamp(),
        "reports": [r.to_dict() for r in reports],
        "summary": summarize(reports),
    }


def dump_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_campaign(path, reports) -> dict:
    doc = campaign_document(reports)
    dump_json(doc, path)
    return doc


def read_campaign(path):
    """Load and validate a campaign report; returns ``(document, reports)``."""
    import jsonschema

    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    jsonschema.validate(doc, CAMPAIGN_SCHEMA)
    return doc, [McReport.from_dict(r) for r in doc["reports"]]


# --------------------------------------------------------------------------
# deterministic checks
# --------------------------------------------------------------------------

@dataclass
class MomentCheck:
    model_id: str
    theta: float
    n: int
    seed: int
    sample_mean: float
    std_error: float
    mean_formula: float
    partition_slope: float
    z_score: float
    passed: bool


def moment_check(model: ExpFamilyModel, theta, n=10 ** 6, seed=0, z_max=DEFAULT_Z_MAX) -> MomentCheck:
    """Compare the sample mean with the derivative of the log-partition.

    The slope is taken by central differences; the sign accounts for upper
    orientation where the density is ``exp(-theta' x - A)``.
    """
    model.check_theta(theta)
    x = model.sample(theta, n, seed)
    mean = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(n))
    step = 1e-5 * max(1.0, abs(theta))
    lo, hi = model.theta_domain
    step = min(step, 0.5 * (theta - lo), 0.5 * (hi - theta))
    slope = (model.log_partition(theta + step) - model.log_partition(theta - step)) / (2 * step)
    slope *= model.support.sign
    formula = float(model.mean_fn(theta)) if model.mean_fn else slope
    z = (mean - slope) / se
    return MomentCheck(model.name, float(theta), n, int(seed), mean, se, formula, float(slope), float(z),
                       bool(abs(z) <= z_max))


def unbiasedness_identity(spec: EstimatorSpec, theta, tol=1e-12):
    """``int delta(x) f_theta(x) dx`` by nested quadrature.

    Returns ``(integral, target, abs_error_bound)`` where the bound is the
    outer quadrature's.
    """
    model = spec.resolved_model
    phi = spec.resolved_theta(theta)
    model.check_theta(phi)
    s = model.support.sign
    log_a = model.log_partition(phi)
    lo, hi = model.support.interval
    mid = model.mean_fn(phi) if model.mean_fn else 0.0
    cuts = [lo, mid, hi] if lo < mid < hi else [lo, hi]

    def log_delta(x):
        # nodes far in the tails carry no mass; their inner integrals need not converge
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", QuadratureWarning)
            return spec.log_evaluate(x)

    def integrand(x):
        return log_delta(x)[0] + model.log_h(x) + s * phi * x - log_a

    def sign(x):
        return log_delta(x)[1]

    total = 0.0
    bound = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        r = numerics.integrate(integrand, a, b, tol=tol, sign=None if spec.q.nonnegative else sign)
        total += r.value
        bound += r.abs_error_bound
    return total, eval_q(spec.q, phi), bound


# --------------------------------------------------------------------------
# divergence of the second moment (normal model, reciprocal target)
# --------------------------------------------------------------------------

LOG_SQRT_2PI = numerics.LOG_SQRT_2PI
DEFAULT_THRESHOLDS = (1e3, 1e6, 1e9)
DEFAULT_SCHEDULE = (10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6)


def log_g(theta, x):
    """Log of the integrand of E[delta^2] under N(theta, 1), delta the Mills ratio."""
    x = np.asarray(x, dtype=float)
    out = LOG_SQRT_2PI - 0.5 * theta * theta + 2.0 * log_std_normal_sf(x) + theta * x + 0.5 * x * x
    return float(out) if out.ndim == 0 else out


def log_g_slope(theta, x):
    x = np.asarray(x, dtype=float)
    return theta + x - 2.0 / mills_ratio(x)


@dataclass
class DivergenceReport:
    theta: float
    seed: int
    g_values: list
    log_g_values: list
    local_minimum: Optional[float]
    threshold_crossings: dict
    running_second_moment: list
    direction: str = "x -> -inf"
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g_values"] = [[_jsonable(x), _jsonable(g)] for x, g in self.g_values]
        d["log_g_values"] = [[_jsonable(x), _jsonable(v)] for x, v in self.log_g_values]
        d["threshold_crossings"] = {k: _jsonable(v) for k, v in self.threshold_crossings.items()}
        d["running_second_moment"] = [[int(k), _jsonable(v)] for k, v in self.running_second_moment]
        d["version"] = REPORT_VERSION
        d["timestamp"] = report_timestamp()
        return d


def _bisect(fn, a, b, iters=200):
    """Root of fn on [a, b] with fn(a) and fn(b) of opposite sign."""
    fa = fn(a)
    for _ in range(iters):
        m = 0.5 * (a + b)
        if m in (a, b):
            break
        fm = fn(m)
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def divergence_anchor(theta):
    """Right end of the region (-inf, anchor] on which log g strictly decreases.

    The slope is ``theta + x - 2/M(x)``, negative for every x < -theta. The
    anchor is its first sign change scanning right from -theta (a local
    minimum of g), or 0 if there is none up to 0.
    """
    grid = np.linspace(-theta, 0.0, 2001)
    slope = log_g_slope(theta, grid)
    up = np.flatnonzero(slope >= 0)
    if up.size == 0:
        return 0.0
    i = up[0]
    if i == 0:
        return float(grid[0])
    return _bisect(lambda x: float(log_g_slope(theta, x)), float(grid[i - 1]), float(grid[i]))


def threshold_crossing(theta, level, anchor=None):
    """The x left of the anchor where g reaches ``level`` (g is monotone there)."""
    anchor = divergence_anchor(theta) if anchor is None else anchor
    target = math.log(level)
    if log_g(theta, anchor) >= target:
        return anchor
    step = 1.0
    left = anchor - step
    while log_g(theta, left) < target:
        step *= 2.0
        left = anchor - step
        if step > 1e6:
            return None
    return _bisect(lambda x: log_g(theta, x) - target, left, anchor)


def divergence_demo(theta, x_grid=None, n_schedule=DEFAULT_SCHEDULE, seed=0,
                    thresholds=DEFAULT_THRESHOLDS) -> DivergenceReport:
    """Tabulate g, find where it passes each threshold, and track the
    running mean of delta^2 for N(theta, 1) draws.

    g blows up as x -> -inf (not +inf); crossings are searched leftwards
    from the local minimum.
    """
    theta = float(theta)
    if not theta > 0:
        raise DomainError(f"theta must be positive, got {theta}")
    if x_grid is None:
        x_grid = np.linspace(-8.0, 4.0, 25)
    x_grid = np.asarray(x_grid, dtype=float)
    lg = log_g(theta, x_grid)
    lg = np.atleast_1d(lg)
    with np.errstate(over="ignore"):
        gv = np.exp(lg)
    anchor = divergence_anchor(theta)
    crossings = {f"{t:g}": threshold_crossing(theta, t, anchor) for t in thresholds}

    schedule = sorted(int(k) for k in n_schedule)
    running = []
    if schedule:
        rng = np.random.default_rng(seed)
        x = rng.normal(theta, 1.0, schedule[-1])
        sq = np.exp(2.0 * log_mills_ratio(x))
        cums = np.cumsum(sq)
        running = [(k, float(cums[k - 1] / k)) for k in schedule]
    notes = ["g grows without bound as x decreases and vanishes as x increases",
             "running_second_moment holds empirical means of delta^2 at the scheduled sample sizes"]
    return DivergenceReport(theta, int(seed), list(zip(x_grid.tolist(), gv.tolist())),
                            list(zip(x_grid.tolist(), lg.tolist())), anchor, crossings, running, notes=notes)


@dataclass(frozen=True)
class NonexistenceNote:
    interval: tuple
    statement: str
    empirical_companion: str = "divergence_demo"


def nonexistence_note(theta_interval) -> NonexistenceNote:
    lo, hi = (float(v) for v in theta_interval)
    if not lo < 0 < hi:
        raise DomainError(f"0 must lie strictly inside the interval, got ({lo:g}, {hi:g})")
    statement = (
        f"On theta in ({lo:g}, {hi:g}) no statistic has expectation 1/theta for every theta: "
        "the mean of any statistic with finite expectation is an analytic function of theta "
        "through 0, and 1/theta has a pole at 0. For theta > 0 alone an unbiased estimator "
        "exists but, for the normal model, with infinite second moment (see divergence_demo)."
    )
    return NonexistenceNote((lo, hi), statement)


# --------------------------------------------------------------------------
# default catalog campaign
# --------------------------------------------------------------------------

def default_campaign():
    """``(label, spec, theta)`` triples covering every closed-form family.

    All are finite-variance except normal+reciprocal, which is certified by
    median-of-means. The last three have no closed form.
    """
    from . import models as M
    from . import qfunc as Q

    recip = Q.reciprocal()
    return [
        ("normal-recip", EstimatorSpec(M.normal(), recip), 1.0),
        ("gamma2-recip-0.5", EstimatorSpec(M.gamma(2.0), recip), 0.5),
        ("gamma2-recip-2", EstimatorSpec(M.gamma(2.0), recip), 2.0),
        ("gamma0.5-power2", EstimatorSpec(M.gamma(0.5), Q.power(2.0)), 1.0),
        ("gamma3-power0.5", EstimatorSpec(M.gamma(3.0), Q.power(0.5)), 1.5),
        ("truncgamma2-b1", EstimatorSpec(M.truncated_gamma(2.0, 1.0), recip), 1.0),
        ("truncgamma0.5-b2", EstimatorSpec(M.truncated_gamma(0.5, 2.0), recip), 0.5),
        ("invgauss1-recip", EstimatorSpec(M.inverse_gaussian(1.0), recip), 0.5),
        ("invgauss4-recip", EstimatorSpec(M.inverse_gaussian(4.0), recip), 2.0),
        ("normal-window01", EstimatorSpec(M.normal(), Q.window(0.0, 1.0)), 0.5),
        ("normal-window-shift", EstimatorSpec(M.normal(), Q.window(0.5, 2.0), (LocationShift(0.5),)), -0.5),
        ("normal-sigma2-window", EstimatorSpec(M.normal(2.0), Q.window(0.0, 1.0)), 0.3),
        ("truncnormal-window", EstimatorSpec(M.truncated_normal(1.0, 0.0), Q.window(0.0, 1.0)), 0.5),
        ("gamma2-mixture", EstimatorSpec(M.gamma(2.0), Q.mixture([(1.0, recip), (0.5, Q.power(2.0))])), 1.0),
        # no closed form: generic quadrature path
        ("gamma2-shiftpow", EstimatorSpec(M.gamma(2.0), Q.shifted_power(1.0, 1.5)), 1.0),
        ("gamma2-tilted", EstimatorSpec(M.gamma(2.0), recip, (LocationShift(-0.5),)), 0.5),
        ("invgauss2-power2", EstimatorSpec(M.inverse_gaussian(2.0), Q.power(2.0)), 1.0),
    ]


__all__ = [
    "McReport", "DivergenceReport", "MomentCheck", "NonexistenceNote", "InfiniteVarianceWarning",
    "certify", "certify_grid", "summarize", "exit_code", "mom_bracket", "infinite_variance",
    "campaign_document", "write_campaign", "read_campaign", "CAMPAIGN_SCHEMA", "moment_check",
    "unbiasedness_identity", "log_g", "divergence_demo", "threshold_crossing", "nonexistence_note",
    "default_campaign", "SignFlip", "Truncation", "LocationShift",
]
