"""Command-line interface: ``cmest estimate|verify|demo-divergence|catalog``.

Exit codes: 0 success / all certified, 1 statistical failure, 2 usage or
domain error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from . import verify as V
from .errors import DomainError, ParseError
from .estimator import DEFAULT_TOL, EstimatorSpec, LocationShift, SignFlip, Truncation, closed_form
from .models import parse_model, sufficient_reduction
from .qfunc import parse_q

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# --------------------------------------------------------------------------
# input parsing
# --------------------------------------------------------------------------

def parse_float_list(text, what="value"):
    out = []
    for i, item in enumerate(text.split(",")):
        item = item.strip()
        try:
            v = float(item)
        except ValueError:
            raise ParseError(f"{what} #{i + 1}: {item!r} is not a number") from None
        if not math.isfinite(v):
            raise ParseError(f"{what} #{i + 1}: {item!r} is not finite")
        out.append(v)
    if not out:
        raise ParseError(f"no {what}s given")
    return out


def _cell(raw):
    """``(value, error)`` for one data cell."""
    try:
        v = float(raw)
    except (TypeError, ValueError):
        return None, f"{raw!r} is not a number"
    if not math.isfinite(v):
        return None, f"{raw!r} is not finite"
    return v, None


def read_csv_column(path, column=None):
    """Rows of one CSV column as ``(raw, value, error)``; a non-numeric first row is a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    header = None
    if any(_cell(c)[1] for c in rows[0]):
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    idx = 0
    if column is not None:
        if header is not None and column in header:
            idx = header.index(column)
        else:
            try:
                idx = int(column)
            except ValueError:
                raise ParseError(f"{path}: no column named {column!r}") from None
    out = []
    for r in rows:
        raw = r[idx].strip() if idx < len(r) else ""
        v, err = _cell(raw)
        out.append((raw, v, err if raw else "missing value"))
    if not out:
        raise ParseError(f"{path}: no data rows")
    return out


def read_json_values(path, column=None):
    """A JSON list of numbers, a list of records, or an object of columns."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if isinstance(doc, dict):
        key = column if column is not None else next(iter(doc), None)
        if key not in doc:
            raise ParseError(f"{path}: no column {key!r}")
        doc = doc[key]
    if not isinstance(doc, list) or not doc:
        raise ParseError(f"{path}: expected a non-empty list of values")
    out = []
    for item in doc:
        if isinstance(item, dict):
            if column is None or column not in item:
                out.append((json.dumps(item), None, f"record has no field {column!r}"))
                continue
            item = item[column]
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            out.append((json.dumps(item), None, f"{item!r} is not a number"))
            continue
        v, err = _cell(item)
        out.append((repr(item), v, err))
    return out


def read_data(path, column=None):
    if str(path).lower().endswith(".json"):
        return read_json_values(path, column)
    return read_csv_column(path, column)


def build_spec(args) -> EstimatorSpec:
    model = parse_model(args.model)
    q = parse_q(args.q)
    chain = []
    if args.theta0 is not None:
        chain.append(LocationShift(args.theta0))
    if args.flip:
        chain.append(SignFlip())
    if args.trunc is not None:
        chain.append(Truncation(args.trunc))
    return EstimatorSpec(model, q, tuple(chain), tol=args.tol)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _fmt_num(v):
    return "" if v is None else repr(float(v))


def cmd_estimate(args) -> int:
    spec = build_spec(args)
    if args.data is not None:
        rows = read_data(args.data, args.column)
    else:
        rows = [(repr(v), v, None) for v in parse_float_list(args.x, "x")]
    if args.sufficient:
        bad = [r for r in rows if r[2]]
        if bad:
            raise ParseError(f"cannot form a sufficient statistic: {bad[0][2]}")
        total = float(sum(r[1] for r in rows))
        spec = EstimatorSpec(sufficient_reduction(spec.model, len(rows)), spec.q, spec.transforms, tol=spec.tol)
        rows = [(repr(total), total, None)]

    results = []
    for i, (raw, x, err) in enumerate(rows):
        rec = {"index": i, "x": x, "value": None, "method": None, "error_bound": None, "error": err}
        if err is None:
            try:
                est = spec.estimate(x)
                rec.update(value=est.value, method=est.method, error_bound=est.quadrature_error_bound)
            except (DomainError, ValueError) as exc:
                rec["error"] = str(exc)
        rec["raw"] = raw
        results.append(rec)

    out = sys.stdout
    out.write("x,value,method,error_bound,error\n")
    for r in results:
        x_txt = _fmt_num(r["x"]) if r["x"] is not None else r["raw"]
        if r["error"]:
            out.write(f"{x_txt},,error,,{json.dumps(r['error'])}\n")
        else:
            out.write(f"{x_txt},{r['value']!r},{r['method']},{_fmt_num(r['error_bound'])},\n")
    if args.out:
        doc = {
            "version": V.REPORT_VERSION,
            "timestamp": V.report_timestamp(),
            "model_id": spec.model.name,
            "q_id": spec.q.name,
            "transform_id": spec.transform_id,
            "estimates": [{k: V._jsonable(v) for k, v in r.items() if k != "raw"} for r in results],
        }
        V.dump_json(doc, args.out)
    return EXIT_USAGE if any(r["error"] for r in results) else EXIT_OK


def _print_campaign(reports):
    for r in reports:
        print(r.summary_line())
    s = V.summarize(reports)
    print(f"summary: pass={s['pass']} fail={s['fail']}")


def cmd_verify(args) -> int:
    if args.from_report:
        try:
            _, reports = V.read_campaign(args.from_report)
        except Exception as exc:  # jsonschema.ValidationError, OSError, JSON errors
            print(f"error: {args.from_report}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        _print_campaign(reports)
        return V.exit_code(reports)
    missing = [f for f in ("model", "q", "thetas") if getattr(args, f) is None]
    if missing:
        raise ParseError("verify needs " + ", ".join("--" + m for m in missing) + " (or --from-report)")
    spec = build_spec(args)
    thetas = parse_float_list(args.thetas, "theta")
    reports = V.certify_grid(spec, thetas, n=args.n, base_seed=args.seed, z_max=args.z_max,
                             method=args.method, timing=args.timing)
    _print_campaign(reports)
    if args.out:
        V.write_campaign(args.out, reports)
    return V.exit_code(reports)


def cmd_demo_divergence(args) -> int:
    if not args.theta > 0:
        raise DomainError(f"theta must be positive, got {args.theta}")
    schedule = [10 ** k for k in range(3, int(round(math.log10(args.n_max))) + 1)]
    rep = V.divergence_demo(args.theta, n_schedule=schedule, seed=args.seed)
    print(f"theta={rep.theta:g}; g increases without bound as x decreases from {rep.local_minimum:.6g}")
    for level, x in rep.threshold_crossings.items():
        print(f"g > {level}: x < {x:.10g}")
    for n, m2 in rep.running_second_moment:
        print(f"n={n}: mean delta^2 = {m2:.6g}")
    if args.out:
        V.dump_json(rep.to_dict(), args.out)
    return EXIT_OK


CATALOG_MODELS = ("normal", "normal:sigma=2", "truncnormal:sigma=1,b=0", "gamma:alpha=2",
                  "gamma:alpha=2,trunc_lo=1", "invgauss:lambda=1")
CATALOG_Q = ("recip", "power:k=2", "power:k=0.5", "shiftpow:b=1,k=1", "shiftpow:b=0,k=2", "window:d1=0,d2=1")


def catalog_rows():
    rows = []
    for m_txt in CATALOG_MODELS:
        model = parse_model(m_txt)
        for q_txt in CATALOG_Q:
            cf = closed_form(model, parse_q(q_txt))
            rows.append((m_txt, q_txt, "yes" if cf else "no", cf[0] if cf else "quadrature"))
    return rows


def cmd_catalog(args) -> int:
    rows = [("model", "q", "closed_form", "method")] + catalog_rows()
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    print()
    print("transforms: --theta0 <t> (location shift), --flip (sign flip), --trunc <b> (truncation);"
          " applied in that order")
    print("mixtures: mix:w1*<q>;w2*<q> is closed-form when every component is")
    if args.out:
        V.dump_json({"version": V.REPORT_VERSION,
                     "rows": [dict(zip(("model", "q", "closed_form", "method"), r)) for r in rows[1:]]},
                    args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="write a JSON report to this path")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--tol", type=float, default=DEFAULT_TOL, help="absolute quadrature tolerance")

    transforms = argparse.ArgumentParser(add_help=False)
    transforms.add_argument("--theta0", type=float, help="location shift: target q(theta - theta0)")
    transforms.add_argument("--flip", action="store_true", help="observe -X (sign flip)")
    transforms.add_argument("--trunc", type=float, help="truncation bound b")

    p = argparse.ArgumentParser(prog="cmest", description="Unbiased estimation of completely monotone "
                                "functions of an exponential-family parameter.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", parents=[common, transforms], help="evaluate the estimator on data")
    e.add_argument("--model", required=True, help="e.g. normal, gamma:alpha=2, invgauss:lambda=1")
    e.add_argument("--q", required=True, help="e.g. recip, power:k=2, shiftpow:b=1,k=2, window:d1=0,d2=1")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--x", help="comma-separated observations")
    src.add_argument("--data", help="CSV or JSON file of observations")
    e.add_argument("--column", help="CSV/JSON column name (or CSV index)")
    e.add_argument("--sufficient", action="store_true",
                   help="treat the data as one i.i.d. sample and estimate from its sum")
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("verify", parents=[common, transforms], help="Monte Carlo certification")
    v.add_argument("--model")
    v.add_argument("--q")
    v.add_argument("--thetas", help="comma-separated parameter grid (use --thetas=-1,2 for negatives)")
    v.add_argument("--n", type=int, default=10 ** 6)
    v.add_argument("--z-max", type=float, default=V.DEFAULT_Z_MAX)
    v.add_argument("--method", choices=("auto", "z", "mom"), default="auto")
    v.add_argument("--timing", action="store_true", help="record wall time (breaks byte-identical reports)")
    v.add_argument("--from-report", help="re-read and validate a JSON campaign report")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("demo-divergence", parents=[common], help="show that E[delta^2] is infinite")
    d.add_argument("--theta", type=float, required=True)
    d.add_argument("--n-max", type=int, default=10 ** 6, help="largest sample size in the running moment")
    d.set_defaults(func=cmd_demo_divergence)

    c = sub.add_parser("catalog", parents=[common], help="list models, targets and closed forms")
    c.set_defaults(func=cmd_catalog)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
