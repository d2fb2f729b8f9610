"""The invariant suite behind ``agemlab verify``.

Each entry is an ordinary experiment config run through the harness, so the
suite also exercises config validation, persistence and the manifest.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .harness import CheckResult, config_from_dict, load_config, packaged_config, run_experiment


def _energy(objective: str, theta0: list, eta: float) -> dict:
    return {
        "schema": 2,
        "name": f"energy_{objective}_eta{eta:g}",
        "objective": objective,
        "theta0": theta0,
        "budget": 1000,
        "methods": [
            {"method": "aegd", "eta": eta},
            {"method": "sgem", "eta": eta, "beta": 0.9},
            {"method": "agem", "eta": eta, "beta": 0.9},
            {"method": "agem", "eta": eta, "beta": 0.0, "label": "agem_beta0"},
        ],
        "diagnostics": [
            {"name": "energy_identity", "params": {"tol": 1e-12}},
            {"name": "summed_bound", "params": {"tol": 1e-12}},
            {"name": "r_monotone"},
            {"name": "match", "params": {"a": "agem_beta0", "b": "aegd", "tol": 1e-15}},
        ],
    }


SUITE: list[dict] = []
for _obj, _th in (("quadratic", [3.0]), ("pl_sine", [2.0]), ("rosenbrock2d", [-1.2, 1.0])):
    for _eta in (0.1, 0.01):
        SUITE.append(_energy(_obj, _th, _eta))

SUITE += [
    {
        "schema": 2, "name": "discrete_convergence_pl_sine", "objective": "pl_sine",
        "theta0": [2.0], "budget": 100000, "grad_tol": 1e-6,
        "methods": [{"method": "agem", "eta": 0.01, "beta": 0.9}],
        "diagnostics": [{"name": "converged", "params": {"grad_tol": 1e-6}},
                        {"name": "r_floor", "params": {"fraction": 0.5}},
                        {"name": "r_monotone"}],
    },
    {
        "schema": 2, "name": "lyapunov_pl_sine", "objective": "pl_sine", "theta0": [2.0],
        "budget": 0,
        "ode": {"kind": "agem_limit", "eps": 0.05, "T": 50.0, "dt": 1e-3, "integrator": "rk4"},
        "diagnostics": [{"name": "lyapunov_decay", "params": {"tol": 1e-8}}, {"name": "ode_bounds"}],
    },
    {
        "schema": 2, "name": "gradient_flow_quadratic", "objective": "quadratic", "theta0": [3.0],
        "budget": 0,
        "diagnostics": [{"name": "gradient_flow_equivalence", "params": {"T": 1.0, "dt": 1e-4, "tol": 1e-6}},
                        {"name": "pl_constant", "params": {"expect": 2.0, "tol": 1e-9}}],
    },
    {
        # from (-1.2, 1) the early transient is stiff enough that RK4 at dt = 1e-4
        # leaves a truncation defect of about 3e-6; (-1, 1) gives 3e-9
        "schema": 2, "name": "gradient_flow_rosenbrock", "objective": "rosenbrock2d",
        "theta0": [-1.0, 1.0], "budget": 0,
        "diagnostics": [{"name": "gradient_flow_equivalence", "params": {"T": 1.0, "dt": 1e-4, "tol": 1e-6}}],
    },
    {
        "schema": 2, "name": "linear_rate_pl_sine", "objective": "pl_sine", "theta0": [2.0],
        "budget": 0,
        "diagnostics": [{"name": "pl_constant", "params": {"grid": 10000, "min": 0.03125, "tol": 1e-9}},
                        {"name": "rate_bound", "params": {"delta": 0.5, "mu": 0.03125,
                                                          "eps_fraction": 0.9, "T": 50.0,
                                                          "region": [[-3.141592653589793, 3.141592653589793]]}}],
    },
    {
        "schema": 2, "name": "theta_rate_quadratic", "objective": "quadratic", "theta0": [2.0],
        "budget": 0,
        "ode": {"kind": "agem_limit", "eps": 0.05, "T": 15.0, "dt": 5e-3, "integrator": "rk4"},
        "diagnostics": [{"name": "theta_rate", "params": {"alpha": 0.5, "min_rsq": 0.99}}],
    },
    {
        "schema": 2, "name": "theta_rate_quartic", "objective": "quartic", "theta0": [1.0],
        "budget": 0,
        "ode": {"kind": "agem_limit", "eps": 0.5, "T": 1000.0, "dt": 0.05, "integrator": "rk4"},
        "diagnostics": [{"name": "lojasiewicz", "params": {"alpha": 0.25, "tol": 0.02, "source": "ode"}},
                        {"name": "theta_rate", "params": {"alpha": "fit", "slack": 0.1}}],
    },
    {
        "schema": 2, "name": "gram_identity", "objective": "quadratic", "theta0": [0.0],
        "budget": 0, "seed": 20240601,
        "diagnostics": [{"name": "gram_identity", "params": {"width": 16, "points": 5, "draws": 20}}],
    },
]


@dataclass
class SuiteItem:
    experiment: str
    result: CheckResult
    seconds: float

    @property
    def label(self) -> str:
        return f"{self.experiment}/{self.result.name}"


def suite_configs() -> list:
    cfgs = [config_from_dict(d) for d in SUITE]
    cfgs.append(load_config(packaged_config("pl_sine_consistency")))
    cfgs.append(load_config(packaged_config("rosenbrock_fig1")))
    return cfgs


def run_suite(output: Optional[str] = None, select: Optional[str] = None,
              progress: Optional[Callable[[SuiteItem], None]] = None) -> list:
    """Run every suite experiment; ``select`` keeps configs whose name contains it."""
    items = []
    with tempfile.TemporaryDirectory(prefix="agemlab_verify_") as tmp:
        root = Path(output or tmp)
        for cfg in suite_configs():
            if select and select not in cfg.name:
                continue
            t0 = time.perf_counter()
            man = run_experiment(cfg, root / cfg.name)
            dt = time.perf_counter() - t0
            for r in man.runs:
                if r["mandatory"] and r["error"]:
                    item = SuiteItem(cfg.name, CheckResult(f"run:{r['name']}", False, float("-inf"),
                                                           error=r["error"]), dt)
                    items.append(item)
                    if progress:
                        progress(item)
            for c in man.checks:
                res = CheckResult(c["name"], c["passed"], _float(c["margin"]), _float(c["value"]),
                                  _float(c["threshold"]), c["detail"], error=c["error"])
                item = SuiteItem(cfg.name, res, dt)
                items.append(item)
                if progress:
                    progress(item)
    return items


def _float(x) -> float:
    return float("nan") if x is None else float(x)
