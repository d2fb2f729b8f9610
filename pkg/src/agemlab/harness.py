"""Experiment configuration, orchestration and persistence.

A config is a YAML mapping with a ``schema`` key. The current schema is 2;
schema 1 files (``steps`` instead of ``budget``, ``name`` instead of
``method`` in run entries) are upgraded on load.

Output layout, one directory per experiment::

    <method>_<objective>.csv     one per discrete run (suffix _2, _3 on clashes)
    ode_<kind>_<objective>.csv   when an ``ode`` section is present
    consistency.csv              when the ``consistency`` check runs
    report.json                  run summaries and check verdicts
    manifest.json                config hash, file digests, step counts
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .diagnostics import (
    ControlParams,
    InadmissibleParamsError,
    InsufficientDataError,
    ToyNetwork,
    control_decay_check,
    control_E_series,
    epsilon_thresholds,
    gram_matrix_pl,
    jacobian_fd_error,
    lojasiewicz_fit,
    pl_constant_estimate,
    rate_bound_check,
    summed_energy_bound,
    theta_rate_check,
)
from .dynamics import (
    KINDS,
    OdeSystem,
    consistency_study,
    gradient_flow_equivalence,
    initial_state,
    integrate,
)
from .objective import (
    F_eval_all,
    Objective,
    RootView,
    UnknownObjectiveError,
    hessian_max_eig,
    make_builtin,
    root_view,
)
from .optim import ENERGY_METHODS, METHODS, run
from .trajectory import COLUMNS_TAIL, Trajectory

SCHEMA_VERSION = 2
SCHEMA_READABLE = (1, 2)
INTEGRATORS = ("rk4", "split")
CSV_FMT = "%.17g"


class ConfigError(ValueError):
    """Invalid config; carries the offending field and its source position."""

    def __init__(self, message: str, field: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None):
        self.field = field
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        prefix = f"{field}: " if field else ""
        super().__init__(f"{prefix}{message}{where}")


# ---------------------------------------------------------------------------
# config types


@dataclass(frozen=True)
class ObjectiveSpec:
    name: str
    dim: Optional[int] = None
    shift_c: Optional[float] = None
    F_star_floor: Optional[float] = None

    def build(self) -> tuple[Objective, RootView]:
        obj = make_builtin(self.name, self.dim)
        if self.shift_c is not None:
            obj = dataclasses.replace(obj, shift_c=float(self.shift_c))
        return obj, root_view(obj, self.F_star_floor)


@dataclass(frozen=True)
class MethodSpec:
    method: str
    eta: float
    beta: float = 0.0
    label: Optional[str] = None
    budget: Optional[int] = None
    mandatory: bool = True


@dataclass(frozen=True)
class OdeSpec:
    kind: str
    T: float
    dt: float
    eps: float = 0.0
    eta: float = 0.0
    integrator: Optional[str] = None
    mandatory: bool = True


@dataclass(frozen=True)
class CheckSpec:
    name: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    objective: ObjectiveSpec
    theta0: Any  # tuple of floats or the string "random"
    methods: tuple = ()
    budget: int = 1000
    grad_tol: Optional[float] = None
    f_tol: Optional[float] = None
    ode: Optional[OdeSpec] = None
    diagnostics: tuple = ()
    seed: int = 0
    output: Optional[str] = None
    name: str = "experiment"
    description: str = ""
    schema: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["methods"] = [dataclasses.asdict(m) for m in self.methods]
        d["diagnostics"] = [dataclasses.asdict(c) for c in self.diagnostics]
        d["theta0"] = list(self.theta0) if isinstance(self.theta0, tuple) else self.theta0
        return d

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form; the output path is excluded."""
        d = self.to_dict()
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# parsing and validation


def _mark_index(node, path=(), out=None) -> dict:
    """Map key paths to ``(line, column)`` (1-based) of a composed YAML tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = (k.start_mark.line + 1, k.start_mark.column + 1)
            _mark_index(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            p = path + (i,)
            out[p] = (v.start_mark.line + 1, v.start_mark.column + 1)
            _mark_index(v, p, out)
    return out


def parse_config_text(text: str) -> tuple[dict, dict]:
    """Parse YAML into a raw mapping and a key-path position index."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        col = mark.column + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"parse error: {problem}", line=line, column=col) from None
    if data is None:
        raise ConfigError("parse error: empty document", line=1, column=1)
    if not isinstance(data, dict):
        mark = node.start_mark
        raise ConfigError("parse error: top level must be a mapping",
                          line=mark.line + 1, column=mark.column + 1)
    return data, _mark_index(node)


class _Validator:
    def __init__(self, marks: Optional[dict] = None):
        self.marks = marks or {}

    def fail(self, path: tuple, msg: str):
        pos = None
        for i in range(len(path), 0, -1):
            pos = self.marks.get(path[:i])
            if pos:
                break
        name = ".".join(str(p) if not isinstance(p, int) else f"[{p}]" for p in path).replace(".[", "[")
        raise ConfigError(msg, field=name or None, line=pos[0] if pos else None,
                          column=pos[1] if pos else None)

    def keys(self, path, d, allowed, required=()):
        if not isinstance(d, dict):
            self.fail(path, "expected a mapping")
        for k in d:
            if k not in allowed:
                self.fail(path + (k,), f"unknown key (allowed: {', '.join(allowed)})")
        for k in required:
            if k not in d:
                self.fail(path, f"missing required key {k!r}")

    def number(self, path, x, positive=False, nonneg=False, optional=False):
        if x is None and optional:
            return None
        if isinstance(x, str):
            # YAML 1.1 reads 1e-4 (no dot) as a string
            try:
                x = float(x)
            except ValueError:
                pass
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            self.fail(path, f"expected a number, got {x!r}")
        x = float(x)
        if not math.isfinite(x):
            self.fail(path, "must be finite")
        if positive and not x > 0:
            self.fail(path, "must be positive")
        if nonneg and x < 0:
            self.fail(path, "must be non-negative")
        return x

    def integer(self, path, x, nonneg=True, optional=False):
        if x is None and optional:
            return None
        if isinstance(x, bool) or not isinstance(x, int):
            self.fail(path, f"expected an integer, got {x!r}")
        if nonneg and x < 0:
            self.fail(path, "must be non-negative")
        return x

    def boolean(self, path, x):
        if not isinstance(x, bool):
            self.fail(path, f"expected true or false, got {x!r}")
        return x

    def string(self, path, x, optional=False):
        if x is None and optional:
            return None
        if not isinstance(x, str):
            self.fail(path, f"expected a string, got {x!r}")
        return x


def _upgrade_v1(data: dict) -> dict:
    data = dict(data)
    if "steps" in data:
        data["budget"] = data.pop("steps")
    runs = []
    for m in data.get("methods") or []:
        if isinstance(m, dict) and "name" in m and "method" not in m:
            m = dict(m)
            m["method"] = m.pop("name")
        runs.append(m)
    if "methods" in data:
        data["methods"] = runs
    data["schema"] = SCHEMA_VERSION
    return data


_TOP_KEYS = ("schema", "name", "description", "objective", "theta0", "methods", "budget",
             "grad_tol", "f_tol", "ode", "diagnostics", "seed", "output")
_TOP_KEYS_V1 = tuple(k for k in _TOP_KEYS if k != "budget") + ("steps",)


def config_from_dict(data: dict, marks: Optional[dict] = None) -> ExperimentConfig:
    """Validate a raw mapping (as parsed from YAML) into an :class:`ExperimentConfig`."""
    val = _Validator(marks)
    if not isinstance(data, dict):
        val.fail((), "config must be a mapping")
    if "schema" not in data:
        val.fail((), "missing required key 'schema'")
    schema = data["schema"]
    if schema not in SCHEMA_READABLE:
        val.fail(("schema",), f"unsupported schema {schema!r}; readable: {SCHEMA_READABLE}")
    if schema == 1:
        val.keys((), data, _TOP_KEYS_V1, required=("objective", "theta0"))
        data = _upgrade_v1(data)
        val.marks = {}  # positions refer to the original layout
    else:
        val.keys((), data, _TOP_KEYS, required=("objective", "theta0"))

    o = data["objective"]
    if isinstance(o, str):
        o = {"name": o}
    val.keys(("objective",), o, ("name", "dim", "shift_c", "F_star_floor"), required=("name",))
    ospec = ObjectiveSpec(
        name=val.string(("objective", "name"), o["name"]),
        dim=val.integer(("objective", "dim"), o.get("dim"), optional=True),
        shift_c=val.number(("objective", "shift_c"), o.get("shift_c"), optional=True),
        F_star_floor=val.number(("objective", "F_star_floor"), o.get("F_star_floor"),
                                positive=True, optional=True),
    )
    try:
        obj, _ = ospec.build()
    except UnknownObjectiveError as exc:
        val.fail(("objective", "name"), str(exc.args[0]))
    except ValueError as exc:
        val.fail(("objective",), str(exc))

    th = data["theta0"]
    if th == "random":
        theta0 = "random"
    else:
        if isinstance(th, (int, float)) and not isinstance(th, bool):
            th = [th]
        if not isinstance(th, list):
            val.fail(("theta0",), "expected a list of numbers or 'random'")
        theta0 = tuple(val.number(("theta0", i), x) for i, x in enumerate(th))
        if len(theta0) != obj.dim:
            val.fail(("theta0",), f"has {len(theta0)} entries, objective dimension is {obj.dim}")

    methods = []
    raw_methods = data.get("methods") or []
    if not isinstance(raw_methods, list):
        val.fail(("methods",), "expected a list")
    labels = set()
    for i, m in enumerate(raw_methods):
        p = ("methods", i)
        val.keys(p, m, ("method", "eta", "beta", "label", "budget", "mandatory"),
                 required=("method", "eta"))
        name = val.string(p + ("method",), m["method"])
        if name not in METHODS:
            val.fail(p + ("method",), f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
        beta = val.number(p + ("beta",), m.get("beta", 0.0), nonneg=True)
        if not beta < 1.0:
            val.fail(p + ("beta",), "must be < 1")
        label = val.string(p + ("label",), m.get("label"), optional=True)
        if label is not None:
            if label in labels:
                val.fail(p + ("label",), f"duplicate label {label!r}")
            labels.add(label)
        methods.append(MethodSpec(
            method=name,
            eta=val.number(p + ("eta",), m["eta"], positive=True),
            beta=beta,
            label=label,
            budget=val.integer(p + ("budget",), m.get("budget"), optional=True),
            mandatory=val.boolean(p + ("mandatory",), m.get("mandatory", True)),
        ))

    ode = None
    if data.get("ode") is not None:
        d = data["ode"]
        p = ("ode",)
        val.keys(p, d, ("kind", "eps", "eta", "T", "dt", "integrator", "mandatory"),
                 required=("kind", "T", "dt"))
        kind = val.string(p + ("kind",), d["kind"])
        if kind not in KINDS:
            val.fail(p + ("kind",), f"unknown system {kind!r}; expected one of {', '.join(KINDS)}")
        integ = val.string(p + ("integrator",), d.get("integrator"), optional=True)
        if integ is not None and integ not in INTEGRATORS:
            val.fail(p + ("integrator",), f"unknown integrator {integ!r}")
        eps = val.number(p + ("eps",), d.get("eps", 0.0), nonneg=True)
        if kind != "gradient_flow" and not eps > 0:
            val.fail(p + ("eps",), f"{kind} needs eps > 0")
        ode = OdeSpec(kind=kind, T=val.number(p + ("T",), d["T"], nonneg=True),
                      dt=val.number(p + ("dt",), d["dt"], positive=True), eps=eps,
                      eta=val.number(p + ("eta",), d.get("eta", 0.0), nonneg=True),
                      integrator=integ,
                      mandatory=val.boolean(p + ("mandatory",), d.get("mandatory", True)))

    checks = []
    raw_checks = data.get("diagnostics") or []
    if not isinstance(raw_checks, list):
        val.fail(("diagnostics",), "expected a list")
    for i, c in enumerate(raw_checks):
        p = ("diagnostics", i)
        if isinstance(c, str):
            c = {"name": c}
        val.keys(p, c, ("name", "params"), required=("name",))
        cname = val.string(p + ("name",), c["name"])
        if cname not in CHECKS:
            val.fail(p + ("name",), f"unknown check {cname!r}; expected one of {', '.join(CHECKS)}")
        params = c.get("params") or {}
        if not isinstance(params, dict):
            val.fail(p + ("params",), "expected a mapping")
        allowed = CHECKS[cname].params
        for k in params:
            if k not in allowed:
                val.fail(p + ("params", k), f"unknown parameter for {cname} (allowed: {', '.join(allowed)})")
        checks.append(CheckSpec(cname, dict(params)))

    return ExperimentConfig(
        objective=ospec,
        theta0=theta0,
        methods=tuple(methods),
        budget=val.integer(("budget",), data.get("budget", 1000)),
        grad_tol=val.number(("grad_tol",), data.get("grad_tol"), positive=True, optional=True),
        f_tol=val.number(("f_tol",), data.get("f_tol"), positive=True, optional=True),
        ode=ode,
        diagnostics=tuple(checks),
        seed=val.integer(("seed",), data.get("seed", 0)),
        output=val.string(("output",), data.get("output"), optional=True),
        name=val.string(("name",), data.get("name", "experiment")),
        description=val.string(("description",), data.get("description", "")),
        schema=SCHEMA_VERSION,
    )


def load_raw_config(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text)


def load_config(path) -> ExperimentConfig:
    """Read and validate a YAML experiment config."""
    data, marks = load_raw_config(path)
    return config_from_dict(data, marks)


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``rosenbrock_fig1``."""
    p = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not p.exists():
        raise ConfigError(f"no packaged config named {name!r}")
    return p


# ---------------------------------------------------------------------------
# trajectory tables


def write_trajectory(traj: Trajectory, path) -> None:
    """Write ``traj`` as CSV with 17 significant digits; 0 rows give a header-only file."""
    path = Path(path)
    header = ",".join(traj.columns())
    try:
        with open(path, "w", newline="") as fh:
            fh.write(header + "\n")
            if len(traj):
                np.savetxt(fh, traj.as_matrix(), fmt=CSV_FMT, delimiter=",")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write trajectory: {exc.strerror}", str(path)) from exc


def read_trajectory(path) -> Trajectory:
    """Inverse of :func:`write_trajectory`; the momentum vectors are not restored."""
    path = Path(path)
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            body = fh.read()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read trajectory: {exc.strerror}", str(path)) from exc
    n = sum(1 for h in header if h.startswith("theta_"))
    expected = ["k_or_t"] + [f"theta_{i}" for i in range(n)] + list(COLUMNS_TAIL)
    if header != expected:
        raise ValueError(f"{path}: unexpected header {header}")
    if not body.strip():
        return Trajectory.empty(n)
    M = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    cols = {c: M[:, 1 + n + i] for i, c in enumerate(COLUMNS_TAIL)}
    return Trajectory(time=M[:, 0], theta=M[:, 1:1 + n], **cols)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checks


@dataclass
class CheckResult:
    """Verdict of one named check. ``margin >= 0`` means pass where a margin applies."""

    name: str
    passed: bool
    margin: float
    value: float = math.nan
    threshold: float = math.nan
    detail: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    error: Optional[str] = None

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "margin": _num(self.margin),
                "value": _num(self.value), "threshold": _num(self.threshold),
                "detail": _jsonable(self.detail), "error": self.error}


@dataclass
class RunRecord:
    name: str
    spec: Any
    trajectory: Trajectory
    file: Optional[str] = None
    wall_clock: float = 0.0

    @property
    def iterations_to_f_tol(self) -> Optional[int]:
        st = self.trajectory.meta.get("status")
        return int(self.trajectory.meta["steps"]) if st == "f_tol" else None


@dataclass
class Context:
    config: ExperimentConfig
    objective: Objective
    view: RootView
    theta0: np.ndarray
    runs: list
    ode: Optional[RunRecord]
    rng: np.random.Generator
    outdir: Path
    extra_trajectories: list = field(default_factory=list)

    def run_by(self, label: str) -> RunRecord:
        for r in self.runs:
            if r.name == label or r.spec.label == label:
                return r
        hits = [r for r in self.runs if r.spec.method == label]
        if len(hits) == 1:
            return hits[0]
        raise KeyError(f"no unique run named {label!r}")

    def energy_runs(self):
        return [r for r in self.runs if r.spec.method in ENERGY_METHODS and len(r.trajectory) > 0]


@dataclass(frozen=True)
class Check:
    fn: Callable[[Context, dict], CheckResult]
    params: tuple


CHECKS: dict[str, Check] = {}


def _check(name: str, *params: str):
    def deco(fn):
        CHECKS[name] = Check(fn, params)
        return fn
    return deco


def _bound(name, value, threshold, upper=True, **detail) -> CheckResult:
    margin = threshold - value if upper else value - threshold
    return CheckResult(name, bool(margin >= 0), float(margin), float(value), float(threshold),
                       detail=detail)


@_check("energy_identity", "tol")
def _c_energy_identity(ctx: Context, p: dict) -> CheckResult:
    tol = float(p.get("tol", 1e-12))
    worst = {}
    for r in ctx.energy_runs():
        t = r.trajectory
        worst[r.name] = float(np.max(np.abs(t.identity_residual))) / t.r[0] ** 2
    value = max(worst.values(), default=0.0)
    return _bound("energy_identity", value, tol, per_run=worst)


@_check("summed_bound", "tol")
def _c_summed_bound(ctx: Context, p: dict) -> CheckResult:
    tol = float(p.get("tol", 1e-12))
    worst = {}
    for r in ctx.energy_runs():
        if len(r.trajectory) > 1:
            worst[r.name] = float(summed_energy_bound(r.trajectory, r.spec.eta).max())
    value = max(worst.values(), default=0.0)
    return _bound("summed_bound", value, 1.0 + tol, per_run=worst)


@_check("r_monotone", "tol", "runs")
def _c_r_monotone(ctx: Context, p: dict) -> CheckResult:
    tol = float(p.get("tol", 0.0))
    names = p.get("runs")
    worst = {}
    for r in ctx.energy_runs():
        if names and r.name not in names and r.spec.label not in names:
            continue
        worst[r.name] = float(np.max(np.diff(r.trajectory.r), initial=-math.inf))
    value = max(worst.values(), default=-math.inf)
    return _bound("r_monotone", value, tol, per_run=worst)


@_check("r_floor", "fraction", "runs")
def _c_r_floor(ctx: Context, p: dict) -> CheckResult:
    """``min r_k >= fraction * F_star_floor``."""
    frac = float(p.get("fraction", 0.5))
    names = p.get("runs")
    floor = frac * ctx.view.F_star_floor
    mins = {r.name: float(r.trajectory.r.min()) for r in ctx.energy_runs()
            if not names or r.name in names or r.spec.label in names}
    value = min(mins.values(), default=math.inf)
    return _bound("r_floor", value, floor, upper=False, per_run=mins)


@_check("converged", "grad_tol", "runs")
def _c_converged(ctx: Context, p: dict) -> CheckResult:
    tol = float(p.get("grad_tol", ctx.config.grad_tol or 1e-6))
    names = p.get("runs")
    finals = {r.name: float(r.trajectory.grad_f_norm[-1]) for r in ctx.runs
              if len(r.trajectory) and (not names or r.name in names or r.spec.label in names)}
    value = max(finals.values(), default=math.inf)
    return _bound("converged", value, tol, final_grad_norm=finals)


@_check("match", "a", "b", "tol")
def _c_match(ctx: Context, p: dict) -> CheckResult:
    """Two runs agree coordinate-wise at every step (e.g. AGEM with beta = 0 vs AEGD)."""
    a, b = ctx.run_by(p["a"]).trajectory, ctx.run_by(p["b"]).trajectory
    tol = float(p.get("tol", 1e-15))
    if len(a) != len(b):
        return CheckResult("match", False, -math.inf, detail={"lengths": [len(a), len(b)]})
    value = float(np.max(np.abs(a.theta - b.theta), initial=0.0))
    value = max(value, float(np.max(np.abs(a.r - b.r), initial=0.0)))
    return _bound("match", value, tol, a=p["a"], b=p["b"])


def _require_ode(ctx: Context, name: str) -> Trajectory:
    if ctx.ode is None or len(ctx.ode.trajectory) == 0:
        raise InsufficientDataError(f"{name} needs an ode section")
    return ctx.ode.trajectory


@_check("lyapunov_decay", "tol")
def _c_lyapunov(ctx: Context, p: dict) -> CheckResult:
    t = _require_ode(ctx, "lyapunov_decay")
    tol = float(p.get("tol", 1e-8))
    value = float(np.max(np.diff(t.Q), initial=-math.inf))
    return _bound("lyapunov_decay", value, tol, samples=len(t))


@_check("ode_bounds", "tol")
def _c_ode_bounds(ctx: Context, p: dict) -> CheckResult:
    """``|v| <= running max |grad F|``, ``0 < r <= r0`` and ``F(theta) <= F(theta0)``."""
    t = _require_ode(ctx, "ode_bounds")
    tol = float(p.get("tol", 1e-12))
    F = np.sqrt(t.f + ctx.view.c)
    gF = t.grad_f_norm / (2.0 * F)
    v_excess = float(np.max(t.v_norm - np.maximum.accumulate(gF)))
    r_excess = float(np.max(t.r - t.r[0]))
    F_excess = float(np.max(F - F[0]))
    r_min = float(t.r.min())
    value = max(v_excess, r_excess, F_excess)
    res = _bound("ode_bounds", value, tol, v_excess=v_excess, r_excess=r_excess,
                 F_excess=F_excess, r_min=r_min)
    if not r_min > 0:
        res.passed = False
    return res


@_check("gradient_flow_equivalence", "T", "dt", "tol")
def _c_gf(ctx: Context, p: dict) -> CheckResult:
    value = gradient_flow_equivalence(ctx.view, ctx.theta0, float(p.get("T", 1.0)),
                                      float(p.get("dt", 1e-4)))
    return _bound("gradient_flow_equivalence", value, float(p.get("tol", 1e-6)))


@_check("pl_constant", "grid", "region", "min", "expect", "tol")
def _c_pl(ctx: Context, p: dict) -> CheckResult:
    """Grid PL estimate; ``expect`` asks for equality within ``tol``, ``min`` for a lower bound."""
    region = p.get("region")
    if region is not None:
        region = np.atleast_2d(np.asarray(region, dtype=float))
    mu = pl_constant_estimate(ctx.objective, region, int(p.get("grid", 10_000)))
    tol = float(p.get("tol", 1e-9))
    if "expect" in p:
        dev = abs(mu - float(p["expect"]))
        return CheckResult("pl_constant", dev <= tol, tol - dev, mu, float(p["expect"]))
    return _bound("pl_constant", mu, float(p.get("min", 0.0)) - tol, upper=False)


@_check("lojasiewicz", "alpha", "tol", "window", "runs", "source")
def _c_loj(ctx: Context, p: dict) -> CheckResult:
    """Fitted Lojasiewicz exponent of each run (or the ODE with ``source: ode``)."""
    fstar = ctx.objective.known_fstar
    window = tuple(p.get("window", (1e-12, 1e-2)))
    if p.get("source") == "ode":
        trajs = {"ode": _require_ode(ctx, "lojasiewicz")}
    else:
        names = p.get("runs")
        trajs = {r.name: r.trajectory for r in ctx.runs
                 if not names or r.name in names or r.spec.label in names}
    fits = {k: lojasiewicz_fit(t, fstar, window)._asdict() for k, t in trajs.items()}
    if "alpha" not in p:
        return CheckResult("lojasiewicz", True, math.nan, detail=fits)
    tol = float(p.get("tol", 0.02))
    dev = max((abs(f["alpha"] - float(p["alpha"])) for f in fits.values()), default=math.inf)
    return _bound("lojasiewicz", dev, tol, fits=fits)


@_check("theta_rate", "alpha", "source", "tail_fraction", "slack", "min_rsq")
def _c_theta_rate(ctx: Context, p: dict) -> CheckResult:
    """Decay model of ``|theta - theta*|``. ``alpha: fit`` uses the fitted exponent."""
    if p.get("source", "ode") == "ode":
        traj = _require_ode(ctx, "theta_rate")
    else:
        traj = ctx.run_by(p["source"]).trajectory
    alpha = p.get("alpha", "fit")
    if alpha == "fit":
        alpha = lojasiewicz_fit(traj, ctx.objective.known_fstar).alpha
    alpha = float(alpha)
    theta_star = ctx.objective.known_minimizers[0]
    v = theta_rate_check(traj, theta_star, alpha, tail_fraction=float(p.get("tail_fraction", 0.5)),
                         slack=float(p.get("slack", 0.1)))
    detail = {"alpha": alpha, "fit": dataclasses.asdict(v.fit) if v.fit else None,
              "theorem_exponent": v.theorem_exponent, "vacuous": v.vacuous}
    passed = v.passed
    if v.fit is not None and "min_rsq" in p and v.fit.rsq < float(p["min_rsq"]):
        passed = False
    return CheckResult("theta_rate", passed, v.margin, detail=detail)


@_check("rate_bound", "delta", "mu", "eps_fraction", "T", "dt", "L", "region", "r_star")
def _c_rate_bound(ctx: Context, p: dict) -> CheckResult:
    """Linear-rate bound of the limit ODE with the admissible control pair.

    ``eps = eps_fraction * min(eps1, eps2)`` is chosen with ``r* = F*`` (the
    smallest value ``r*`` can take); the bound is then evaluated with the
    ``r*`` measured at the end of the run, after rechecking the thresholds.
    """
    view, obj = ctx.view, ctx.objective
    delta = float(p.get("delta", 0.5))
    mu = float(p["mu"])
    fstar = obj.known_fstar
    F_star = math.sqrt(fstar + view.c)
    region = p.get("region")
    region = None if region is None else np.atleast_2d(np.asarray(region, dtype=float))
    L = float(p["L"]) if "L" in p else hessian_max_eig(obj, region)
    _, _, F0, _ = F_eval_all(view, ctx.theta0)
    guess = float(p.get("r_star", F_star))
    eps = float(p.get("eps_fraction", 0.9)) * epsilon_thresholds(mu, L, F0, F_star, guess, delta).min
    T = float(p.get("T", 50.0))
    dt = float(p.get("dt", eps / 10.0))
    system = OdeSystem("agem_limit", view, eps=eps)
    traj = integrate(system, initial_state(view, ctx.theta0), T, dt, "rk4")
    if traj.error:
        raise FloatingPointError(traj.error)
    r_meas = float(traj.r[-1])
    params = ControlParams.admissible(delta, eps, mu, L, F0, F_star, r_meas)
    try:
        verdict = rate_bound_check(traj, params, fstar)
    except InadmissibleParamsError as exc:
        return CheckResult("rate_bound", False, -math.inf, error=str(exc))
    decay = control_decay_check(traj, view, params, fstar)
    traj.E_opt[:] = control_E_series(traj, view, params, fstar)
    ctx.extra_trajectories.append(("rate_bound_" + obj.name, traj))
    th = params.thresholds()
    return CheckResult(
        "rate_bound", verdict.passed and decay.passed, verdict.min_slack, detail={
            "eps": eps, "eps1": th.eps1, "eps2": th.eps2, "L": L, "r_star": r_meas,
            "min_rel_slack": verdict.min_rel_slack, "decay_defect": decay.max_defect,
            "decay_envelope_margin": decay.envelope_margin, "min_b": decay.min_b,
            "samples": len(traj)})


@_check("consistency", "eps", "T", "etas", "ratio_min", "ratio_max")
def _c_consistency(ctx: Context, p: dict) -> CheckResult:
    """AGEM vs limit ODE at fixed ``eps`` over halving step sizes; writes ``consistency.csv``."""
    etas = [float(e) for e in p.get("etas", (0.02, 0.01, 0.005))]
    table = consistency_study(ctx.objective, ctx.theta0, float(p.get("eps", 0.05)),
                              float(p.get("T", 1.0)), etas, view=ctx.view)
    lo, hi = float(p.get("ratio_min", 1.5)), float(p.get("ratio_max", 3.0))
    path = ctx.outdir / "consistency.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eta", "beta", "steps", "error", "ratio"])
        for r in table.rows:
            w.writerow([CSV_FMT % r.eta, CSV_FMT % r.beta, r.steps, CSV_FMT % r.error,
                        "" if r.ratio is None else CSV_FMT % r.ratio])
    ratios = table.ratios
    margin = min(np.min(ratios - lo, initial=math.inf), np.min(hi - ratios, initial=math.inf))
    passed = table.monotone and bool(margin >= 0)
    res = CheckResult("consistency", passed, float(margin), detail={
        "etas": etas, "errors": table.errors.tolist(), "ratios": ratios.tolist(),
        "richardson_change": table.richardson_change})
    res.files.append(path.name)
    return res


@_check("gram_identity", "width", "points", "draws", "tol", "jac_tol")
def _c_gram(ctx: Context, p: dict) -> CheckResult:
    """Gram-matrix form of ``|grad f|^2`` for a random tanh network (uses the seed)."""
    net = ToyNetwork(int(p.get("width", 16)))
    m = int(p.get("points", 5))
    rng = ctx.rng
    X = rng.uniform(-1.0, 1.0, size=(m, 1))
    y = rng.standard_normal(m)
    tol, jtol = float(p.get("tol", 1e-10)), float(p.get("jac_tol", 1e-6))
    res_max, jac_max, min_eig = 0.0, 0.0, math.inf
    for _ in range(int(p.get("draws", 20))):
        theta = net.random_params(rng)
        g = gram_matrix_pl(net, X, y, theta)
        res_max = max(res_max, g.residual)
        min_eig = min(min_eig, g.min_eig)
        jac_max = max(jac_max, jacobian_fd_error(net, theta, X))
    margin = min(tol - res_max, jtol - jac_max)
    return CheckResult("gram_identity", bool(margin >= 0), margin, res_max, tol,
                       detail={"jacobian_fd_error": jac_max, "min_eig": min_eig})


@_check("fastest", "method", "metric")
def _c_fastest(ctx: Context, p: dict) -> CheckResult:
    """``method`` reaches ``f_tol`` in fewer iterations than every other run."""
    target = p.get("method", "agem")
    its = {r.name: r.iterations_to_f_tol for r in ctx.runs}
    mine = ctx.run_by(target).iterations_to_f_tol
    others = [v for k, v in its.items() if k != ctx.run_by(target).name]
    best_other = min((v if v is not None else math.inf for v in others), default=math.inf)
    if mine is None:
        return CheckResult("fastest", False, -math.inf, detail={"iterations": its})
    margin = best_other - mine
    return CheckResult("fastest", bool(margin > 0), float(margin), float(mine), float(best_other),
                       detail={"iterations": its})


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunManifest:
    config_hash: str
    version: str
    outdir: str
    runs: list
    checks: list
    files: dict
    wall_clock: float
    manifest_hash: str = ""

    @property
    def failed_mandatory(self) -> list:
        return [r["name"] for r in self.runs if r["mandatory"] and r["error"]]

    @property
    def failed_checks(self) -> list:
        return [c["name"] for c in self.checks if not c["passed"]]

    @property
    def ok(self) -> bool:
        return not self.failed_mandatory and not self.failed_checks

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (bool, np.bool_)):
        return bool(o)
    if isinstance(o, (int, np.integer)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        return _num(o)
    return o


def _summary(rec: RunRecord) -> dict:
    t = rec.trajectory
    last = len(t) - 1
    return _jsonable({
        "name": rec.name,
        "method": getattr(rec.spec, "method", None) or getattr(rec.spec, "kind", None),
        "label": getattr(rec.spec, "label", None),
        "eta": getattr(rec.spec, "eta", None),
        "beta": getattr(rec.spec, "beta", None),
        "eps": t.meta.get("eps"),
        "status": t.meta.get("status", "error" if t.error else "done"),
        "steps": int(t.meta.get("steps", max(last, 0))),
        "samples": len(t),
        "iterations_to_f_tol": getattr(rec, "iterations_to_f_tol", None),
        "final_f": t.f[last] if last >= 0 else None,
        "final_grad_f_norm": t.grad_f_norm[last] if last >= 0 else None,
        "final_r": t.r[last] if last >= 0 else None,
        "final_theta": t.theta[last] if last >= 0 else None,
        "mandatory": rec.spec.mandatory,
        "error": t.error,
        "file": rec.file,
    })


def _unique_name(base: str, taken: set) -> str:
    name, i = base, 2
    while name in taken:
        name = f"{base}_{i}"
        i += 1
    taken.add(name)
    return name


def resolve_theta0(config: ExperimentConfig, obj: Objective, rng: np.random.Generator) -> np.ndarray:
    if config.theta0 == "random":
        return rng.uniform(obj.box[:, 0], obj.box[:, 1])
    return np.array(config.theta0, dtype=float)


def default_output() -> str:
    return os.environ.get("AGEMLAB_OUTPUT", "agemlab_out")


def run_experiment(config: ExperimentConfig, output=None) -> RunManifest:
    """Execute every run, the ODE integration and the checks of ``config``.

    A failing run is recorded and its partial trajectory kept; the remaining
    runs and checks still execute. Output goes to ``output``, else
    ``config.output``, else ``$AGEMLAB_OUTPUT`` (default ``agemlab_out``).
    """
    t_start = time.perf_counter()
    outdir = Path(output or config.output or default_output())
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    obj, view = config.objective.build()
    theta0 = resolve_theta0(config, obj, rng)
    taken: set = set()
    files: dict = {}

    runs = []
    for spec in config.methods:
        base = spec.label or f"{spec.method}_{obj.name}"
        name = _unique_name(base, taken)
        t0 = time.perf_counter()
        try:
            traj = run(spec.method, obj, theta0, spec.eta, spec.beta,
                       budget=spec.budget if spec.budget is not None else config.budget,
                       grad_tol=config.grad_tol, f_tol=config.f_tol, view=view)
        except Exception as exc:  # crash isolation: keep siblings running
            traj = Trajectory.empty(obj.dim, method=spec.method, objective=obj.name,
                                    error=f"{type(exc).__name__}: {exc}", meta={"status": "error"})
        rec = RunRecord(name, spec, traj, f"{name}.csv", time.perf_counter() - t0)
        write_trajectory(traj, outdir / rec.file)
        runs.append(rec)

    ode_rec = None
    if config.ode is not None:
        o = config.ode
        name = _unique_name(f"ode_{o.kind}_{obj.name}", taken)
        t0 = time.perf_counter()
        try:
            system = OdeSystem(o.kind, view, eps=o.eps, eta=o.eta)
            traj = integrate(system, initial_state(view, theta0), o.T, o.dt, o.integrator)
        except Exception as exc:
            traj = Trajectory.empty(obj.dim, method=o.kind, objective=obj.name, continuous=True,
                                    error=f"{type(exc).__name__}: {exc}")
        ode_rec = RunRecord(name, o, traj, f"{name}.csv", time.perf_counter() - t0)
        write_trajectory(traj, outdir / ode_rec.file)

    ctx = Context(config, obj, view, theta0, runs, ode_rec, rng, outdir)
    checks = []
    for cs in config.diagnostics:
        try:
            res = CHECKS[cs.name].fn(ctx, cs.params)
        except Exception as exc:
            res = CheckResult(cs.name, False, -math.inf, error=f"{type(exc).__name__}: {exc}")
        checks.append(res)
    for name, traj in ctx.extra_trajectories:
        fname = _unique_name(name, taken) + ".csv"
        write_trajectory(traj, outdir / fname)
        files[fname] = None

    records = runs + ([ode_rec] if ode_rec else [])
    for rec in records:
        files[rec.file] = None
    for c in checks:
        for f in c.files:
            files[f] = None

    report = {
        "name": config.name,
        "objective": obj.name,
        "theta0": theta0.tolist(),
        "seed": config.seed,
        "runs": [_summary(r) for r in runs],
        "ode": _summary(ode_rec) if ode_rec else None,
        "comparison": comparison_table(runs),
        "checks": [c.as_dict() for c in checks],
    }
    (outdir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    files["report.json"] = None
    for f in files:
        files[f] = file_sha256(outdir / f)

    run_entries = []
    for rec in records:
        t = rec.trajectory
        run_entries.append(_jsonable({
            "name": rec.name, "file": rec.file, "steps": int(t.meta.get("steps", max(len(t) - 1, 0))),
            "samples": len(t), "status": t.meta.get("status", "error" if t.error else "done"),
            "error": t.error, "mandatory": rec.spec.mandatory, "wall_clock": rec.wall_clock,
        }))
    manifest = RunManifest(
        config_hash=config.hash(), version=__version__, outdir=str(outdir), runs=run_entries,
        checks=[c.as_dict() for c in checks], files=dict(sorted(files.items())),
        wall_clock=time.perf_counter() - t_start)
    manifest.manifest_hash = manifest_hash(manifest)
    (outdir / "manifest.json").write_text(json.dumps(manifest.as_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_hash(manifest: RunManifest) -> str:
    """Digest of the manifest without wall-clock times and the output path."""
    d = manifest.as_dict()
    d.pop("manifest_hash", None)
    d.pop("wall_clock", None)
    d.pop("outdir", None)
    d["runs"] = [{k: v for k, v in r.items() if k != "wall_clock"} for r in d["runs"]]
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def comparison_table(runs: Sequence[RunRecord]) -> list:
    """Runs ordered by iterations to ``f_tol`` (unreached last), then final ``f``."""
    rows = []
    for r in runs:
        t = r.trajectory
        rows.append({"name": r.name, "method": r.spec.method, "eta": r.spec.eta,
                     "beta": r.spec.beta, "iterations_to_f_tol": r.iterations_to_f_tol,
                     "steps": int(t.meta.get("steps", 0)),
                     "final_f": _num(t.f[-1]) if len(t) else None,
                     "error": t.error})
    key = lambda row: (row["iterations_to_f_tol"] is None,
                       row["iterations_to_f_tol"] or 0,
                       row["final_f"] if isinstance(row["final_f"], float) else math.inf)
    return sorted(rows, key=key)
