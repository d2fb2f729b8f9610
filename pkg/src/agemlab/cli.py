"""Command-line front end.

Precedence for every setting is flag > config file (``--config``) > builtin
default. The default output directory is ``$AGEMLAB_OUTPUT`` or
``agemlab_out``. Exit status: 0 on success, 1 on a failed check or a failed
mandatory run, 2 on a usage or config error.
"""
from __future__ import annotations

import argparse
import copy
import math
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .dynamics import KINDS
from .harness import (
    INTEGRATORS,
    ConfigError,
    RunManifest,
    config_from_dict,
    load_raw_config,
    packaged_config,
    run_experiment,
)
from .optim import METHODS

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _base(args) -> tuple[dict, Optional[dict]]:
    if getattr(args, "config", None):
        data, marks = load_raw_config(args.config)
        return copy.deepcopy(data), marks
    return {"schema": 2}, None


def _set(d: dict, key: str, value) -> None:
    if value is not None:
        d[key] = value


def _common(d: dict, args) -> None:
    if args.objective is not None:
        d["objective"] = args.objective
    _set(d, "theta0", args.theta0)
    _set(d, "seed", args.seed)
    _set(d, "output", args.output)


def _build(d: dict, marks: Optional[dict], args):
    for k in ("objective", "theta0"):
        if k not in d:
            raise UsageError(f"--{k.replace('_', '-')} is required (or give it in --config)")
    # positions refer to the file only while no flag has changed the layout
    return config_from_dict(d, marks if not _overridden(args) else None)


def _overridden(args) -> bool:
    skip = {"cmd", "config", "func", "output"}
    return any(v is not None and k not in skip for k, v in vars(args).items())


# ---------------------------------------------------------------------------
# reporting


def _fmt(x, spec=".6g") -> str:
    if x is None:
        return "-"
    if isinstance(x, str):
        return x
    return format(x, spec)


def print_runs(man: RunManifest, out=None) -> None:
    out = out or sys.stdout
    import json

    report = json.loads((Path(man.outdir) / "report.json").read_text())
    rows = report["runs"] + ([report["ode"]] if report["ode"] else [])
    if rows:
        print(f"{'run':28s} {'status':9s} {'steps':>7s} {'f_tol at':>9s} {'final f':>13s} "
              f"{'final |grad f|':>15s} {'final r':>11s}", file=out)
    for r in rows:
        print(f"{r['name']:28s} {r['status']:9s} {r['steps']:7d} {_fmt(r['iterations_to_f_tol'], 'd'):>9s} "
              f"{_fmt(r['final_f'], '.6e'):>13s} {_fmt(r['final_grad_f_norm'], '.6e'):>15s} "
              f"{_fmt(r['final_r'], '.6g'):>11s}", file=out)
        if r["error"]:
            print(f"  error: {r['error']}", file=out)
    print_checks(man.checks, out)
    print(f"output: {man.outdir}", file=out)


def print_checks(checks, out=None, prefix: str = "") -> None:
    out = out or sys.stdout
    for c in checks:
        verdict = "PASS" if c["passed"] else "FAIL"
        m = c["margin"]
        m = f"{m:.3e}" if isinstance(m, float) else str(m)
        line = f"{prefix}{c['name']:44s} {verdict}  margin={m}"
        if c.get("error"):
            line += f"  ({c['error']})"
        print(line, file=out)


def _status(man: RunManifest) -> int:
    return EXIT_OK if man.ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    d, marks = _base(args)
    _common(d, args)
    methods = d.get("methods") or []
    entry = {}
    if methods:
        pick = [m for m in methods if m.get("method") == args.method] if args.method else methods[:1]
        entry = dict(pick[0]) if pick else {}
    _set(entry, "method", args.method)
    _set(entry, "eta", args.eta)
    _set(entry, "beta", args.beta)
    if "method" not in entry or "eta" not in entry:
        raise UsageError("run needs --method and --eta (or a config with a method entry)")
    d["methods"] = [entry]
    d.pop("ode", None)
    _set(d, "budget", args.steps)
    _set(d, "grad_tol", args.grad_tol)
    _set(d, "f_tol", args.f_tol)
    cfg = _build(d, marks, args)
    man = run_experiment(cfg)
    print_runs(man)
    return _status(man)


def cmd_ode(args) -> int:
    d, marks = _base(args)
    _common(d, args)
    ode = dict(d.get("ode") or {})
    _set(ode, "kind", args.kind)
    _set(ode, "eps", args.eps)
    _set(ode, "eta", args.eta)
    _set(ode, "T", args.T)
    _set(ode, "dt", args.dt)
    _set(ode, "integrator", args.integrator)
    ode.setdefault("kind", "agem_limit")
    ode.setdefault("T", 10.0)
    if "dt" not in ode:
        eps = float(ode.get("eps", 0.0))
        ode["dt"] = eps / 10.0 if eps > 0 else 1e-3
    d["ode"] = ode
    d["methods"] = []
    d["budget"] = 0
    cfg = _build(d, marks, args)
    man = run_experiment(cfg)
    print_runs(man)
    return _status(man)


def cmd_compare(args) -> int:
    d, marks = _base(args)
    _common(d, args)
    if args.methods:
        d["methods"] = [{"method": m, "eta": args.eta, "beta": args.beta if m != "aegd" else 0.0}
                        for m in args.methods]
        if args.eta is None:
            raise UsageError("--methods needs --eta")
    elif args.eta is not None or args.beta is not None:
        for m in d.get("methods") or []:
            _set(m, "eta", args.eta)
            if m.get("method") != "aegd":
                _set(m, "beta", args.beta)
    _set(d, "budget", args.steps)
    _set(d, "grad_tol", args.grad_tol)
    _set(d, "f_tol", args.f_tol)
    if not d.get("methods"):
        raise UsageError("compare needs --methods or a config with methods")
    cfg = _build(d, marks, args)
    man = run_experiment(cfg)
    print_comparison(man)
    print_checks(man.checks)
    print(f"output: {man.outdir}")
    return _status(man)


def print_comparison(man: RunManifest, out=None) -> None:
    out = out or sys.stdout
    import json

    report = json.loads((Path(man.outdir) / "report.json").read_text())
    print(f"{'rank':>4s} {'run':28s} {'eta':>9s} {'beta':>6s} {'iters to f_tol':>15s} {'final f':>13s}",
          file=out)
    for i, r in enumerate(report["comparison"], 1):
        its = "not reached" if r["iterations_to_f_tol"] is None else str(r["iterations_to_f_tol"])
        print(f"{i:4d} {r['name']:28s} {r['eta']:9.4g} {r['beta']:6.3g} {its:>15s} "
              f"{_fmt(r['final_f'], '.6e'):>13s}", file=out)
        if r["error"]:
            print(f"     error: {r['error']}", file=out)


def cmd_sweep(args) -> int:
    d, marks = _base(args)
    _common(d, args)
    d.setdefault("objective", "pl_sine")
    d.setdefault("theta0", [2.0])
    checks = [c for c in d.get("diagnostics") or [] if isinstance(c, dict) and c.get("name") == "consistency"]
    params = dict(checks[0].get("params") or {}) if checks else {}
    _set(params, "eps", args.eps)
    _set(params, "T", args.T)
    _set(params, "etas", args.etas)
    d["diagnostics"] = [{"name": "consistency", "params": params}]
    d["methods"] = []
    d["budget"] = 0
    d.pop("ode", None)
    cfg = _build(d, marks, args)
    man = run_experiment(cfg)
    c = man.checks[0]
    det = c["detail"]
    if det:
        print(f"{'eta':>10s} {'error':>13s} {'ratio':>8s}")
        ratios = [None] + det["ratios"]
        for eta, err, rat in zip(det["etas"], det["errors"], ratios):
            print(f"{eta:10.4g} {err:13.6e} {_fmt(rat, '8.4f'):>8s}")
        print(f"reference change on dt halving: {det['richardson_change']:.3e}")
    print_checks(man.checks)
    print(f"output: {man.outdir}")
    return _status(man)


def cmd_fig1(args) -> int:
    args.config = args.config or str(packaged_config("rosenbrock_fig1"))
    d, marks = _base(args)
    _set(d, "budget", args.steps)
    _set(d, "output", args.output)
    cfg = config_from_dict(d, marks if args.steps is None else None)
    man = run_experiment(cfg)
    print("tuned Rosenbrock comparison (see the config for how values were chosen)")
    print_comparison(man)
    print_checks(man.checks)
    print(f"output: {man.outdir}")
    return _status(man)


def cmd_verify(args) -> int:
    from .suite import run_suite

    t0 = time.perf_counter()
    failures = 0

    def show(item):
        nonlocal failures
        r = item.result
        failures += not r.passed
        m = f"{r.margin:.3e}" if math.isfinite(r.margin) or math.isinf(r.margin) else "n/a"
        line = f"{item.label:56s} {'PASS' if r.passed else 'FAIL'}  margin={m}"
        if r.error:
            line += f"  ({r.error})"
        print(line, flush=True)

    items = run_suite(output=args.output, select=args.select, progress=show)
    if not items:
        raise UsageError(f"no suite experiment matches {args.select!r}")
    print(f"{len(items) - failures}/{len(items)} invariants hold ({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK if failures == 0 else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agemlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"agemlab {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, objective=True):
        sp.add_argument("--config", help="YAML experiment config; flags override its values")
        sp.add_argument("--output", help="output directory (default $AGEMLAB_OUTPUT or agemlab_out)")
        if objective:
            sp.add_argument("--objective", help="builtin objective, e.g. pl_sine, quadratic_3")
            sp.add_argument("--theta0", type=float, nargs="+", help="initial point")
            sp.add_argument("--seed", type=int)

    def stops(sp):
        sp.add_argument("--steps", type=int, help="iteration budget")
        sp.add_argument("--grad-tol", type=float, dest="grad_tol")
        sp.add_argument("--f-tol", type=float, dest="f_tol")

    sp = sub.add_parser("run", help="run one method on one objective")
    common(sp)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--beta", type=float)
    stops(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ode", help="integrate one continuous-time system")
    common(sp)
    sp.add_argument("--kind", choices=KINDS)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--T", type=float)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--integrator", choices=INTEGRATORS)
    sp.set_defaults(func=cmd_ode)

    sp = sub.add_parser("compare", help="run several methods and rank them")
    common(sp)
    sp.add_argument("--methods", nargs="+", choices=METHODS)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--beta", type=float)
    stops(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("verify", help="run the invariant suite")
    sp.add_argument("--output", help="keep suite outputs here (default: temporary directory)")
    sp.add_argument("--select", help="only experiments whose name contains this string")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sweep", help="discrete-to-continuous consistency study")
    common(sp)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--T", type=float)
    sp.add_argument("--etas", type=float, nargs="+")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("fig1", help="tuned Rosenbrock comparison of AGEM, SGEM, AEGD and GDM")
    common(sp, objective=False)
    sp.add_argument("--steps", type=int, help="iteration budget")
    sp.set_defaults(func=cmd_fig1)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"agemlab {args.cmd}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
