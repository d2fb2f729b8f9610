"""Continuous-time limits of AGEM and their integrators.

Three systems act on ``U = (v, r, theta)``:

``agem_limit``       eps v' = -v + grad F,  r' = -2 r |v|^2,  theta' = -2 r v
``high_resolution``  as above with both ``r'`` and ``theta'`` divided by
                     ``1 + 2 eta |v|^2``
``gradient_flow``    r' = -2 r |grad F|^2,  theta' = -2 r grad F; with
                     ``r(0) = F(theta0)`` this is ``theta' = -grad f``.
                     ``v`` plays no role and is reported as ``grad F``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .objective import DomainError, F_eval_all, Objective, RootView, root_view
from .optim import AgemState, agem_step, beta_for_eps
from .trajectory import Trajectory, TrajectoryBuilder

KINDS = ("agem_limit", "high_resolution", "gradient_flow")
MAX_SAMPLES = 10_000
STABILITY_FACTOR = 10.0
SPLIT_DEFAULT_BELOW_EPS = 1e-3


class StabilityError(ValueError):
    pass


class ReferenceSolutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class OdeState:
    v: np.ndarray
    r: float
    theta: np.ndarray
    t: float = 0.0


class OdeDerivative(NamedTuple):
    v: np.ndarray
    r: float
    theta: np.ndarray


@dataclass(frozen=True)
class OdeSystem:
    kind: str
    view: RootView
    eps: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system {self.kind!r}; expected one of {KINDS}")
        if self.kind != "gradient_flow" and not self.eps > 0:
            raise ValueError(f"{self.kind} needs eps > 0")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")

    @property
    def dim(self) -> int:
        return self.view.base.dim

    @property
    def stiff(self) -> bool:
        return self.kind != "gradient_flow"


def initial_state(view: RootView, theta0, v0=None, r0: Optional[float] = None) -> OdeState:
    """``U(0) = (0, F(theta0), theta0)`` unless ``v0`` or ``r0`` override it."""
    theta0 = np.array(theta0, dtype=float).reshape(view.base.dim)
    if r0 is None:
        _, _, r0, _ = F_eval_all(view, theta0)
    v0 = np.zeros_like(theta0) if v0 is None else np.array(v0, dtype=float).reshape(theta0.shape)
    return OdeState(v0, float(r0), theta0, 0.0)


def _flat_rhs(system: OdeSystem):
    n = system.dim
    obj = system.view.base
    c = obj.shift_c
    eps, eta, kind = system.eps, system.eta, system.kind

    def grad_F(theta):
        s = float(obj.eval(theta)) + c
        if not s > 0:
            raise DomainError(f"f(theta) + c = {s!r} <= 0 at theta={theta.tolist()}")
        return np.asarray(obj.grad(theta), dtype=float) / (2.0 * math.sqrt(s))

    def rhs(y):
        v, r, theta = y[:n], y[n], y[n + 1:]
        gF = grad_F(theta)
        out = np.empty_like(y)
        if kind == "gradient_flow":
            out[:n] = 0.0
            out[n] = -2.0 * r * float(gF @ gF)
            out[n + 1:] = -2.0 * r * gF
            return out
        vv = float(v @ v)
        damp = 1.0 + 2.0 * eta * vv if kind == "high_resolution" else 1.0
        out[:n] = (gF - v) / eps
        out[n] = -2.0 * r * vv / damp
        out[n + 1:] = -2.0 * r * v / damp
        return out

    return rhs


def _pack(state: OdeState) -> np.ndarray:
    return np.concatenate([state.v, [state.r], state.theta])


def _unpack(y, n, t) -> OdeState:
    return OdeState(y[:n].copy(), float(y[n]), y[n + 1:].copy(), t)


def rhs(system: OdeSystem, state: OdeState) -> OdeDerivative:
    """Exact right-hand side of ``system`` at ``state``."""
    n = system.dim
    dy = _flat_rhs(system)(_pack(state))
    return OdeDerivative(dy[:n], float(dy[n]), dy[n + 1:])


class _Recorder:
    def __init__(self, system: OdeSystem):
        self.system = system
        self.out = TrajectoryBuilder(system.dim)
        self.n = system.dim

    def add(self, t, y):
        n = self.n
        sysm = self.system
        v, r, theta = y[:n], float(y[n]), y[n + 1:]
        f, g, F, gF = F_eval_all(sysm.view, theta)
        if sysm.kind == "gradient_flow":
            v = gF
            Q = F
        else:
            Q = F + sysm.eps * r * float(v @ v)
        self.out.add(t, theta, v, r, f, math.sqrt(float(g @ g)), Q)

    def build(self, method, error, **meta):
        sysm = self.system
        meta.update(kind=sysm.kind, eps=sysm.eps, eta=sysm.eta)
        return self.out.build(method=method, objective=sysm.view.base.name,
                              continuous=True, error=error, meta=meta)


def _steps(T, dt):
    if T < 0:
        raise ValueError("T must be non-negative")
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    return n


def _march(system, state0, T, dt, step, method, max_samples):
    n_steps = _steps(T, dt)
    stride = max(1, math.ceil(n_steps / max_samples))
    rec = _Recorder(system)
    y = _pack(state0)
    t0 = state0.t
    rec.add(t0, y)
    error = None
    for i in range(1, n_steps + 1):
        h = dt if i < n_steps else T - (n_steps - 1) * dt
        try:
            y = step(y, h)
            if not np.all(np.isfinite(y)):
                raise FloatingPointError(f"non-finite state at t={t0 + (i - 1) * dt + h:.6g}")
        except (FloatingPointError, DomainError) as exc:
            error = str(exc)
            break
        if i % stride == 0 or i == n_steps:
            rec.add(t0 + (i * dt if i < n_steps else T), y)
    return rec.build(method, error, dt=dt, T=T, steps=n_steps, stride=stride)


def integrate_rk4(system: OdeSystem, state0: OdeState, T: float, dt: float,
                  max_samples: int = MAX_SAMPLES) -> Trajectory:
    """Classical fourth-order Runge-Kutta with fixed step ``dt``.

    For the eps-systems ``dt <= eps / 10`` is enforced. The trajectory keeps
    every ``ceil(steps / max_samples)``-th step plus the final state.
    """
    if system.stiff and dt > system.eps / STABILITY_FACTOR:
        raise StabilityError(f"RK4 needs dt <= eps/{STABILITY_FACTOR:g} = "
                             f"{system.eps / STABILITY_FACTOR:.6g}, got dt={dt:.6g}")
    f = _flat_rhs(system)

    def step(y, h):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return _march(system, state0, T, dt, step, "rk4", max_samples)


def exact_relaxation(v, grad_F, dt: float, eps: float) -> np.ndarray:
    """Solve ``eps v' = -v + grad_F`` over ``dt`` for frozen ``grad_F``."""
    grad_F = np.asarray(grad_F, dtype=float)
    return grad_F + (np.asarray(v, dtype=float) - grad_F) * math.exp(-dt / eps)


def integrate_split(system: OdeSystem, state0: OdeState, T: float, dt: float,
                    max_samples: int = MAX_SAMPLES) -> Trajectory:
    """First-order splitting that is stable for any ``eps``.

    Each step relaxes ``v`` exactly with ``grad F`` frozen at the current
    ``theta``, then advances ``(r, theta)`` with the midpoint momentum
    ``v_mid``: ``r`` is multiplied by ``exp(-2 dt |v_mid|^2)`` (so it stays
    positive and non-increasing) and ``theta`` moves by ``-2 dt r_mid v_mid``.
    """
    if system.kind != "agem_limit":
        raise ValueError("the splitting integrator handles agem_limit only")
    n = system.dim
    obj = system.view.base
    c = obj.shift_c
    def step(y, h):
        v, r, theta = y[:n], y[n], y[n + 1:]
        s = float(obj.eval(theta)) + c
        if not s > 0:
            raise DomainError(f"f(theta) + c = {s!r} <= 0")
        gF = np.asarray(obj.grad(theta), dtype=float) / (2.0 * math.sqrt(s))
        v_new = gF + (v - gF) * math.exp(-h / system.eps)
        vm = 0.5 * (v + v_new)
        r_new = r * math.exp(-2.0 * h * float(vm @ vm))
        out = np.empty_like(y)
        out[:n] = v_new
        out[n] = r_new
        out[n + 1:] = theta - h * (r + r_new) * vm
        return out

    return _march(system, state0, T, dt, step, "split", max_samples)


def integrate(system: OdeSystem, state0: OdeState, T: float, dt: float,
              integrator: Optional[str] = None, max_samples: int = MAX_SAMPLES) -> Trajectory:
    """Dispatch to RK4 or the splitting scheme.

    Without an explicit choice, ``agem_limit`` with ``eps < 1e-3`` uses the
    splitting scheme and everything else RK4.
    """
    if integrator is None:
        integrator = ("split" if system.kind == "agem_limit" and system.eps < SPLIT_DEFAULT_BELOW_EPS
                      else "rk4")
    if integrator == "rk4":
        return integrate_rk4(system, state0, T, dt, max_samples)
    if integrator == "split":
        return integrate_split(system, state0, T, dt, max_samples)
    raise ValueError(f"unknown integrator {integrator!r}")


def final_state(traj: Trajectory) -> np.ndarray:
    """Flat ``(v, r, theta)`` at the last sample."""
    return np.concatenate([traj.v[-1], [traj.r[-1]], traj.theta[-1]])


def gradient_flow_equivalence(view: RootView, theta0, T: float, dt: float) -> float:
    """Max over samples of ``|r(t) - F(theta(t))|`` along the gradient-flow
    limit started from ``r(0) = F(theta0)``."""
    system = OdeSystem("gradient_flow", view)
    traj = integrate_rk4(system, initial_state(view, theta0), T, dt)
    if traj.error:
        raise FloatingPointError(traj.error)
    F = np.sqrt(traj.f + view.c)
    return float(np.max(np.abs(traj.r - F)))


@dataclass(frozen=True)
class ConsistencyRow:
    eta: float
    beta: float
    steps: int
    error: float
    ratio: Optional[float]


@dataclass(frozen=True)
class ConsistencyTable:
    rows: list
    reference: np.ndarray
    reference_dt: float
    richardson_change: float

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.rows])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r.ratio for r in self.rows[1:]], dtype=float)

    @property
    def monotone(self) -> bool:
        e = self.errors
        return bool(np.all(np.diff(e) < 0))


def agem_endpoint(view: RootView, theta0, eta: float, beta: float, steps: int) -> np.ndarray:
    """AGEM state ``(v_k, r_k, theta_k)`` after ``k = steps`` updates.

    ``v_k`` is formed from ``theta_k`` with one extra gradient evaluation so all
    three components refer to the same index.
    """
    st = AgemState.start(view, theta0, eta, beta)
    for _ in range(steps):
        st = agem_step(st, view)
    _, _, _, gF = F_eval_all(view, st.theta)
    v = beta * st.v + (1.0 - beta) * gF
    return np.concatenate([v, [st.r], st.theta])


def reference_solution(system: OdeSystem, theta0, T: float, dt: float,
                       richardson_tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """RK4 endpoint at ``dt`` and the change when ``dt`` is halved."""
    s0 = initial_state(system.view, theta0)
    a = integrate_rk4(system, s0, T, dt, max_samples=1)
    b = integrate_rk4(system, s0, T, dt / 2.0, max_samples=1)
    if a.error or b.error:
        raise ReferenceSolutionError(a.error or b.error)
    ya, yb = final_state(a), final_state(b)
    change = float(np.linalg.norm(ya - yb))
    if change >= richardson_tol:
        raise ReferenceSolutionError(
            f"reference not converged: halving dt={dt:g} changes the endpoint by {change:.3e}")
    return yb, change


def consistency_study(obj: Objective, theta0, eps: float, T: float, etas: Sequence[float],
                      view: Optional[RootView] = None) -> ConsistencyTable:
    """Distance between AGEM after ``floor(T/eta)`` steps and the limit ODE at ``T``.

    For each step size ``beta = eps / (eps + eta)`` keeps ``eps`` fixed. The
    reference is RK4 at ``dt = min(etas) / 10`` with a step-halving check.
    """
    if not etas:
        raise ValueError("need at least one step size")
    view = root_view(obj) if view is None else view
    system = OdeSystem("agem_limit", view, eps=eps)
    ref, change = reference_solution(system, theta0, T, min(etas) / 10.0)
    rows = []
    prev = None
    for eta in etas:
        beta = beta_for_eps(eps, eta)
        k = int(math.floor(T / eta + 1e-9))
        err = float(np.linalg.norm(agem_endpoint(view, theta0, eta, beta, k) - ref))
        rows.append(ConsistencyRow(eta, beta, k, err, None if prev is None else prev / err))
        prev = err
    return ConsistencyTable(rows, ref, min(etas) / 10.0, change)


def high_resolution_gap(view: RootView, theta0, eps: float, T: float, etas: Sequence[float],
                        dt: float) -> np.ndarray:
    """``|U_hr(T; eta) - U_limit(T)|`` for each ``eta`` at a common RK4 step."""
    s0 = initial_state(view, theta0)
    base = final_state(integrate_rk4(OdeSystem("agem_limit", view, eps=eps), s0, T, dt, max_samples=1))
    out = []
    for eta in etas:
        hr = integrate_rk4(OdeSystem("high_resolution", view, eps=eps, eta=eta), s0, T, dt, max_samples=1)
        out.append(float(np.linalg.norm(final_state(hr) - base)))
    return np.array(out)
