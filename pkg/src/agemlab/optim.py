"""Energy-adaptive gradient methods (AEGD, SGEM, AGEM), GD/heavy-ball
baselines and the trajectory runner.

All energy methods share the update

    r_{k+1} = r_k / (1 + 2 eta |v_k|^2),   theta_{k+1} = theta_k - 2 eta r_{k+1} v_k

and differ only in how ``v_k`` is formed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diagnostics import energy_identity_residual
from .objective import DomainError, F_eval_all, Objective, RootView, root_view
from .trajectory import Trajectory, TrajectoryBuilder

ENERGY_METHODS = ("aegd", "sgem", "agem")
METHODS = ENERGY_METHODS + ("gd", "gdm")

DIVERGENCE_F = 1e12


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, theta):
        self.theta = np.array(theta, dtype=float)
        super().__init__(f"non-finite gradient at theta={self.theta.tolist()}")


class DivergenceError(FloatingPointError):
    pass


def momentum_eps(eta: float, beta: float) -> float:
    """The retained momentum timescale ``eps = beta * eta / (1 - beta)``."""
    return beta * eta / (1.0 - beta)


def beta_for_eps(eps: float, eta: float) -> float:
    """Invert :func:`momentum_eps` for ``beta`` at fixed ``eta``."""
    return eps / (eps + eta)


def _check_hyper(eta: float, beta: float) -> None:
    if not eta > 0:
        raise ValueError(f"step size must be positive, got {eta}")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {beta}")


@dataclass(frozen=True)
class AgemState:
    theta: np.ndarray
    r: float
    v: np.ndarray
    k: int
    eta: float
    beta: float = 0.0

    @property
    def eps(self) -> float:
        return momentum_eps(self.eta, self.beta)

    @classmethod
    def start(cls, view: RootView, theta0, eta: float, beta: float = 0.0) -> "AgemState":
        """Initial state ``r_0 = F(theta_0)``, ``v_{-1} = 0``."""
        _check_hyper(eta, beta)
        theta0 = np.array(theta0, dtype=float).reshape(view.base.dim)
        _, _, F, _ = F_eval_all(view, theta0)
        return cls(theta0, F, np.zeros_like(theta0), 0, float(eta), float(beta))


@dataclass(frozen=True)
class SgemState:
    theta: np.ndarray
    r: float
    m: np.ndarray
    k: int
    eta: float
    beta: float = 0.0

    @property
    def eps(self) -> float:
        return momentum_eps(self.eta, self.beta)

    @classmethod
    def start(cls, view: RootView, theta0, eta: float, beta: float = 0.0) -> "SgemState":
        _check_hyper(eta, beta)
        theta0 = np.array(theta0, dtype=float).reshape(view.base.dim)
        _, _, F, _ = F_eval_all(view, theta0)
        return cls(theta0, F, np.zeros_like(theta0), 0, float(eta), float(beta))


@dataclass(frozen=True)
class GdState:
    theta: np.ndarray
    u: np.ndarray
    k: int
    eta: float
    beta: float = 0.0

    @classmethod
    def start(cls, theta0, eta: float, beta: float = 0.0) -> "GdState":
        _check_hyper(eta, beta)
        theta0 = np.array(theta0, dtype=float).ravel()
        return cls(theta0, np.zeros_like(theta0), 0, float(eta), float(beta))


def _energy_update(theta, r, v, eta):
    r_new = r / (1.0 + 2.0 * eta * float(np.dot(v, v)))
    return theta - 2.0 * eta * r_new * v, r_new


def _agem_v(v_prev, gF, beta):
    return beta * v_prev + (1.0 - beta) * gF


def _sgem_v(m_prev, g, F, beta, k):
    # first computed momentum is indexed 1, so the bias factor never vanishes
    m = beta * m_prev + (1.0 - beta) * g
    return m, m / ((1.0 - beta ** (k + 1)) * 2.0 * F)


def _grad_F(view: RootView, theta):
    _, _, _, gF = F_eval_all(view, theta)
    if not np.all(np.isfinite(gF)):
        raise NonFiniteGradientError(theta)
    return gF


def agem_step(state: AgemState, view: RootView) -> AgemState:
    """One AGEM step: momentum on ``grad F``, then the energy update."""
    gF = _grad_F(view, state.theta)
    v = _agem_v(state.v, gF, state.beta)
    theta, r = _energy_update(state.theta, state.r, v, state.eta)
    return AgemState(theta, r, v, state.k + 1, state.eta, state.beta)


def aegd_step(state: AgemState, view: RootView) -> AgemState:
    """AEGD is AGEM with zero momentum; ``state.beta`` is ignored."""
    gF = _grad_F(view, state.theta)
    v = _agem_v(state.v, gF, 0.0)
    theta, r = _energy_update(state.theta, state.r, v, state.eta)
    return AgemState(theta, r, v, state.k + 1, state.eta, state.beta)


def sgem_step(state: SgemState, view: RootView) -> SgemState:
    f, g, F, _ = F_eval_all(view, state.theta)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(state.theta)
    m, v = _sgem_v(state.m, g, F, state.beta, state.k)
    theta, r = _energy_update(state.theta, state.r, v, state.eta)
    return SgemState(theta, r, m, state.k + 1, state.eta, state.beta)


def gd_step(state: GdState, obj: Objective) -> GdState:
    g = np.asarray(obj.grad(state.theta), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(state.theta)
    return GdState(state.theta - state.eta * g, state.u, state.k + 1, state.eta, state.beta)


def gdm_step(state: GdState, obj: Objective) -> GdState:
    """Heavy ball: ``u' = beta u - eta grad f``, ``theta' = theta + u'``."""
    g = np.asarray(obj.grad(state.theta), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(state.theta)
    u = state.beta * state.u - state.eta * g
    return GdState(state.theta + u, u, state.k + 1, state.eta, state.beta)


def run(
    method: str,
    obj: Objective,
    theta0,
    eta: float,
    beta: float = 0.0,
    budget: int = 1000,
    grad_tol: Optional[float] = None,
    f_tol: Optional[float] = None,
    view: Optional[RootView] = None,
) -> Trajectory:
    """Run ``method`` for at most ``budget`` steps and record every iterate.

    Row ``k`` holds ``theta_k``, ``r_k``, ``|v_{k-1}|``, ``f(theta_k)``,
    ``|grad f(theta_k)|``, ``Q_k = F(theta_k) + eps r_k |v_{k-1}|^2`` and the
    energy-identity residual of the step ``k-1 -> k``. The run stops early when
    ``|grad f| <= grad_tol`` or ``f - f* <= f_tol`` (the latter only if ``f*``
    is known). Step failures and divergence do not raise: the partial
    trajectory is returned with ``error`` set.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if method == "aegd":
        beta = 0.0
    _check_hyper(eta, beta)
    if view is None:
        view = root_view(obj)
    theta = np.array(theta0, dtype=float).reshape(obj.dim)
    fstar = obj.known_fstar
    energy = method in ENERGY_METHODS
    eps = momentum_eps(eta, beta)
    c = obj.shift_c

    out = TrajectoryBuilder(obj.dim)
    error = None
    status = "budget"
    r = np.nan
    mom = np.zeros(obj.dim)  # v_{k-1} (agem/aegd), m_{k-1} (sgem) or u_k (gdm)
    vlast = np.zeros(obj.dim)  # direction used by the previous energy update
    prev = None
    k = 0
    while True:
        try:
            f = float(obj.eval(theta))
            if not (math.isfinite(f) and np.all(np.isfinite(theta))) or f > DIVERGENCE_F:
                raise DivergenceError(f"divergence guard: f={f!r} at step {k}")
            g = np.asarray(obj.grad(theta), dtype=float)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(theta)
            gnorm = math.sqrt(float(np.dot(g, g)))
            if energy:
                s = f + c
                if not s > 0:
                    raise DomainError(f"f(theta) + c = {s!r} <= 0 at step {k}")
                F = math.sqrt(s)
                if k == 0:
                    r = F
                Q = F + eps * r * float(np.dot(vlast, vlast))
                res = 0.0 if prev is None else energy_identity_residual(prev[1], prev[0], r, theta, eta)
                out.add(k, theta, vlast, r, f, gnorm, Q, res)
            else:
                out.add(k, theta, mom if method == "gdm" else None, np.nan, f, gnorm, np.nan)
        except (FloatingPointError, DomainError) as exc:
            error = str(exc)
            status = "error"
            break

        if grad_tol is not None and gnorm <= grad_tol:
            status = "grad_tol"
            break
        if f_tol is not None and fstar is not None and f - fstar <= f_tol:
            status = "f_tol"
            break
        if k >= budget:
            break

        if energy:
            if method == "sgem":
                mom, vlast = _sgem_v(mom, g, F, beta, k)
            else:
                mom = vlast = _agem_v(mom, g / (2.0 * F), beta)
            prev = (theta, r)
            theta, r = _energy_update(theta, r, vlast, eta)
        elif method == "gd":
            theta = theta - eta * g
        else:
            mom = beta * mom - eta * g
            theta = theta + mom
        k += 1

    return out.build(method=method, objective=obj.name, error=error,
                     meta={"eta": eta, "beta": beta, "eps": eps, "status": status, "steps": k})
