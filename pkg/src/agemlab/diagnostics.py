"""Verifiable quantities of the AGEM analysis.

Energy identity of the discrete schemes, the Lyapunov function ``Q`` and the
control function ``E`` of the limit ODE, admissible ``eps`` thresholds, PL
and Lojasiewicz estimation, rate checks, the Gram-matrix identity of a toy
network and grid surrogates of the step-size thresholds.

Every verdict carries a margin so callers can assert quantitative slack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .objective import (
    F_eval_all,
    FD_STEP,
    Objective,
    RootView,
    fd_hessian_many,
    grid_points,
    root_view,
)
from .trajectory import Trajectory


class InadmissibleParamsError(ValueError):
    """The hypotheses of the linear-rate theorem do not hold."""


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# energy identity and Lyapunov function


def energy_identity_residual(r_prev: float, theta_prev, r_next: float, theta_next, eta: float) -> float:
    """Signed defect ``r'^2 - r^2 + (r' - r)^2 + |theta' - theta|^2 / eta``.

    Zero in exact arithmetic for every AEGD, SGEM or AGEM step.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    d = np.asarray(theta_next, dtype=float) - np.asarray(theta_prev, dtype=float)
    dr = r_next - r_prev
    return r_next * r_next - r_prev * r_prev + dr * dr + float(np.dot(d, d)) / eta


def summed_energy_bound(traj: Trajectory, eta: float) -> np.ndarray:
    """Prefix sums of ``eta sum (dr)^2 + sum |dtheta|^2`` divided by ``eta r_0^2``.

    Every entry is at most one for an energy-method trajectory.
    """
    dr = np.diff(traj.r)
    dth = np.diff(traj.theta, axis=0)
    s = np.cumsum(eta * dr * dr + np.sum(dth * dth, axis=1))
    return s / (eta * traj.r[0] ** 2)


def lyapunov_Q(view: RootView, theta, r: float, v, eps: float) -> float:
    """``Q = F(theta) + eps r |v|^2``."""
    if not r > 0:
        raise ValueError("r must be positive")
    _, _, F, _ = F_eval_all(view, np.asarray(theta, dtype=float))
    v = np.asarray(v, dtype=float)
    return F + eps * r * float(np.dot(v, v))


# ---------------------------------------------------------------------------
# control function and linear rate


class EpsilonThresholds(NamedTuple):
    eps1: float
    eps2: float

    @property
    def min(self) -> float:
        return min(self.eps1, self.eps2)


def epsilon_thresholds(mu: float, L: float, F0: float, F_star: float, r_star: float,
                       delta: float) -> EpsilonThresholds:
    """Upper bounds on ``eps`` under which the admissible pair works."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if min(mu, L, F0, F_star, r_star) <= 0:
        raise ValueError("mu, L, F0, F_star and r_star must be positive")
    eps1 = delta * (1.0 - delta) * F_star / (2.0 * L * F0)
    eps2 = (2.0 - delta) * (1.0 - delta) * (F0 + F_star * r_star / F0) / (2.0 * mu * F0)
    return EpsilonThresholds(eps1, eps2)


@dataclass(frozen=True)
class ControlParams:
    delta: float
    a: float
    lam: float
    eps: float
    mu: float
    L: float
    r_star: float
    F0: float
    F_star: float

    @classmethod
    def admissible(cls, delta: float, eps: float, mu: float, L: float, F0: float,
                   F_star: float, r_star: float) -> "ControlParams":
        """The closed-form pair ``a = eps mu / (F0 (2 - delta))``,
        ``lam = (1 - delta) F* / r0`` with ``r0 = F0``."""
        if not 0.0 < delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        a = eps * mu / (F0 * (2.0 - delta))
        lam = (1.0 - delta) * F_star / F0
        return cls(delta, a, lam, eps, mu, L, r_star, F0, F_star)

    def thresholds(self) -> EpsilonThresholds:
        return epsilon_thresholds(self.mu, self.L, self.F0, self.F_star, self.r_star, self.delta)

    def check(self) -> None:
        """Raise :class:`InadmissibleParamsError` unless ``eps <= min(eps1, eps2)``."""
        th = self.thresholds()
        if not self.eps <= th.min * (1.0 + 1e-12):
            raise InadmissibleParamsError(
                f"eps={self.eps:.6g} exceeds min(eps1, eps2)={th.min:.6g} "
                f"(eps1={th.eps1:.6g}, eps2={th.eps2:.6g})")
        want_a = self.eps * self.mu / (self.F0 * (2.0 - self.delta))
        want_lam = (1.0 - self.delta) * self.F_star / self.F0
        if not (math.isclose(self.a, want_a, rel_tol=1e-12) and math.isclose(self.lam, want_lam, rel_tol=1e-12)):
            raise InadmissibleParamsError("(a, lam) is not the admissible pair for these inputs")


def control_E(view: RootView, theta, v, r: float, params: ControlParams, f_star: float) -> float:
    """``E = a (f - f*) - eps <grad f, v> + lam eps r |v|^2``."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    f = float(view.base.eval(theta))
    g = np.asarray(view.base.grad(theta), dtype=float)
    p = params
    return p.a * (f - f_star) - p.eps * float(g @ v) + p.lam * p.eps * r * float(v @ v)


def control_E_rate(view: RootView, theta, v, r: float, params: ControlParams,
                   f_star: float, h: float = FD_STEP) -> tuple[float, float, float]:
    """Return ``(E, dE/dt, b)`` along the limit ODE at one state.

    ``b = 1 - 2 a r + lam r / F`` is the instantaneous decay coefficient, so
    ``dE/dt + (b / eps) E <= 0`` is the pointwise decay inequality. The
    Hessian-vector product is a central difference of the gradient.
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    p = params
    obj = view.base
    f, g, F, gF = F_eval_all(view, theta)
    vdot = (gF - v) / p.eps
    thdot = -2.0 * r * v
    rdot = -2.0 * r * float(v @ v)
    Hthdot = (np.asarray(obj.grad(theta + h * thdot)) - np.asarray(obj.grad(theta - h * thdot))) / (2.0 * h)
    E = p.a * (f - f_star) - p.eps * float(g @ v) + p.lam * p.eps * r * float(v @ v)
    dE = (p.a * float(g @ thdot)
          - p.eps * (float(Hthdot @ v) + float(g @ vdot))
          + p.lam * p.eps * (rdot * float(v @ v) + 2.0 * r * float(v @ vdot)))
    b = 1.0 - 2.0 * p.a * r + p.lam * r / F
    return E, dE, b


@dataclass(frozen=True)
class DecayVerdict:
    passed: bool
    max_defect: float
    envelope_margin: float
    min_b: float
    E: np.ndarray


def control_decay_check(traj: Trajectory, view: RootView, params: ControlParams, f_star: float,
                        tol: float = 1e-6) -> DecayVerdict:
    """Check the decay of ``E`` along an ``agem_limit`` trajectory.

    Three conditions are tested at every sample:

    * ``dE/dt + (b/eps) E <= 0``, scaled by ``E(0) / eps``;
    * ``b >= delta``;
    * ``E(t) <= E(0) exp(-delta t / eps)``, scaled by ``|E(0)|``.

    ``E`` may turn negative along the way; the envelope is still an upper
    bound then, but a per-interval contraction at rate ``delta / eps`` is not.
    """
    if traj.v is None:
        raise InsufficientDataError("trajectory carries no momentum vectors")
    n = len(traj)
    E = np.empty(n)
    defect = np.empty(n)
    bs = np.empty(n)
    for i in range(n):
        E[i], dE, bs[i] = control_E_rate(view, traj.theta[i], traj.v[i], traj.r[i], params, f_star)
        defect[i] = dE + bs[i] / params.eps * E[i]
    scale = max(abs(E[0]), 1e-300)
    max_defect = float(np.max(defect) * params.eps / scale)
    t = traj.time - traj.time[0]
    envelope = E[0] * np.exp(-params.delta * t / params.eps)
    env_margin = float(np.min(envelope - E) / scale)
    passed = (max_defect <= tol and env_margin >= -tol
              and float(bs.min()) >= params.delta * (1.0 - 1e-12))
    return DecayVerdict(passed, max_defect, env_margin, float(bs.min()), E)


def control_E_series(traj: Trajectory, view: RootView, params: ControlParams,
                     f_star: float) -> np.ndarray:
    if traj.v is None:
        raise InsufficientDataError("trajectory carries no momentum vectors")
    return np.array([control_E(view, traj.theta[i], traj.v[i], traj.r[i], params, f_star)
                     for i in range(len(traj))])


def rate_bound_rhs(t, params: ControlParams, W0: float) -> np.ndarray:
    """Right-hand side of the linear-rate bound on ``f(theta(t)) - f*``."""
    p = params
    t = np.asarray(t, dtype=float)
    slow = np.exp(-2.0 * p.mu * p.r_star * t / (p.F0 * (2.0 - p.delta)))
    fast = 2.0 * p.mu * p.eps / (p.delta * (2.0 - p.delta)) * np.exp(-p.delta * t / p.eps)
    return W0 * (slow + fast)


@dataclass(frozen=True)
class RateBoundVerdict:
    passed: bool
    min_slack: float
    min_rel_slack: float
    slack: np.ndarray


def rate_bound_check(traj: Trajectory, params: ControlParams, f_star: float) -> RateBoundVerdict:
    """Compare ``f(theta(t)) - f*`` with the linear-rate bound at every sample.

    Raises :class:`InadmissibleParamsError` when ``eps`` violates the
    thresholds: that is a failed hypothesis, not a failed bound.
    """
    params.check()
    if traj.v is not None and np.any(traj.v[0] != 0):
        raise InadmissibleParamsError("the bound assumes v(0) = 0")
    if not math.isclose(traj.r[0], params.F0, rel_tol=1e-12):
        raise InadmissibleParamsError("the bound assumes r(0) = F(theta_0)")
    W = traj.f - f_star
    rhs = rate_bound_rhs(traj.time - traj.time[0], params, W[0])
    slack = rhs - W
    rel = slack / np.maximum(rhs, 1e-300)
    return RateBoundVerdict(bool(np.all(slack >= 0)), float(slack.min()), float(rel.min()), slack)


# ---------------------------------------------------------------------------
# PL and Lojasiewicz


def pl_constant_estimate(obj: Objective, region=None, grid: int = 10_000,
                         f_star: Optional[float] = None, exclude_below: float = 1e-12) -> float:
    """Empirical PL constant ``min |grad f|^2 / (2 (f - f*))`` over a grid.

    ``grid`` is the number of points per axis; points with
    ``f - f* < exclude_below`` are skipped.
    """
    f_star = obj.known_fstar if f_star is None else f_star
    if f_star is None:
        raise ValueError("f* must be known")
    region = obj.box if region is None else region
    pts = grid_points(region, grid)
    gap = obj.eval_many(pts) - f_star
    keep = gap >= exclude_below
    if not np.any(keep):
        raise InsufficientDataError("no grid point with f - f* above the exclusion threshold")
    g = obj.grad_many(pts[keep])
    return float(np.min(np.sum(g * g, axis=-1) / (2.0 * gap[keep])))


class LojasiewiczFit(NamedTuple):
    alpha: float
    c: float
    rsq: float
    n_samples: int


def _linfit(x, y):
    A = np.column_stack([x, np.ones_like(x)])
    (slope, icept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    rsq = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icept), min(max(rsq, 0.0), 1.0)


def lojasiewicz_fit(traj: Trajectory, f_star: float, window=(1e-12, 1e-2),
                    min_samples: int = 10) -> LojasiewiczFit:
    """Fit ``log |grad f| = log c + (1 - alpha) log (f - f*)`` on samples whose
    gap lies strictly inside ``window``."""
    gap = traj.f - f_star
    lo, hi = window
    keep = (gap > lo) & (gap < hi) & (traj.grad_f_norm > 0)
    n = int(np.count_nonzero(keep))
    if n < min_samples:
        raise InsufficientDataError(f"only {n} samples with f - f* in {window}")
    slope, icept, rsq = _linfit(np.log(gap[keep]), np.log(traj.grad_f_norm[keep]))
    return LojasiewiczFit(1.0 - slope, math.exp(icept), rsq, n)


@dataclass(frozen=True)
class RateFit:
    model: str  # "exponential" | "power"
    rate_or_exponent: float
    prefactor: float
    rsq: float
    window: tuple[int, int]


@dataclass(frozen=True)
class ThetaRateVerdict:
    passed: bool
    fit: Optional[RateFit]
    theorem_exponent: Optional[float]
    margin: float
    vacuous: bool = False


def theorem_power_exponent(alpha: float) -> Optional[float]:
    """Decay exponent of ``|theta(t) - theta*|`` predicted for exponent ``alpha``;
    ``None`` for ``alpha = 1/2`` (exponential decay)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if math.isclose(alpha, 0.5, abs_tol=1e-12):
        return None
    if alpha < 0.5:
        return -alpha / (1.0 - 2.0 * alpha)
    return -alpha / (2.0 - 2.0 * alpha)


def theta_rate_check(traj: Trajectory, theta_star, alpha: float, tail_fraction: float = 0.5,
                     converge_tol: float = 1e-8, floor: float = 1e-12, slack: float = 0.1,
                     min_samples: int = 10) -> ThetaRateVerdict:
    """Fit ``|theta(t) - theta*|`` on the trajectory tail to the model implied
    by ``alpha``.

    The tail is the last ``tail_fraction`` of the time span over which the
    distance stays above ``floor``. For ``alpha = 1/2`` the fit is
    ``C exp(-K t)`` and passes when ``K > 0``; the trajectory must end within
    ``converge_tol`` of ``theta*``. Otherwise the fit is ``C (t + 1)^p`` and
    passes when ``p <= p_theorem + slack``.
    """
    d = np.linalg.norm(traj.theta - np.asarray(theta_star, dtype=float), axis=1)
    p_thm = theorem_power_exponent(alpha)
    if np.all(d == 0):
        return ThetaRateVerdict(True, None, p_thm, math.inf, vacuous=True)
    if p_thm is None and d[-1] > converge_tol:
        raise InsufficientDataError(f"trajectory ends {d[-1]:.3e} from theta*, not within {converge_tol}")
    t = traj.time - traj.time[0]
    above = np.nonzero(d > floor)[0]
    t_end = t[above[-1]]
    idx = above[t[above] >= (1.0 - tail_fraction) * t_end]
    if len(idx) < min_samples:
        raise InsufficientDataError(f"tail has {len(idx)} samples, need {min_samples}")
    window = (int(idx[0]), int(idx[-1]) + 1)
    logd = np.log(d[idx])
    if p_thm is None:
        slope, icept, rsq = _linfit(t[idx], logd)
        fit = RateFit("exponential", -slope, math.exp(icept), rsq, window)
        return ThetaRateVerdict(fit.rate_or_exponent > 0, fit, None, fit.rate_or_exponent)
    slope, icept, rsq = _linfit(np.log(t[idx] + 1.0), logd)
    fit = RateFit("power", slope, math.exp(icept), rsq, window)
    margin = p_thm + slack - slope
    return ThetaRateVerdict(margin >= 0, fit, p_thm, margin)


# ---------------------------------------------------------------------------
# Gram matrix of a toy two-layer network


@dataclass(frozen=True)
class ToyNetwork:
    """``g(x; theta) = sum_j a_j tanh(w_j . x + b_j)`` with parameters packed
    as ``theta = (W.ravel(), b, a)``."""

    width: int = 16
    input_dim: int = 1

    def __post_init__(self):
        if self.width < 1 or self.input_dim < 1:
            raise ValueError("width and input_dim must be positive")

    @property
    def n_params(self) -> int:
        return self.width * (self.input_dim + 2)

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        k = self.width * self.input_dim
        W = theta[:k].reshape(self.width, self.input_dim)
        return W, theta[k:k + self.width], theta[k + self.width:]

    def random_params(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.n_params)

    def predict(self, theta, X) -> np.ndarray:
        W, b, a = self.unpack(theta)
        return np.tanh(np.atleast_2d(X) @ W.T + b) @ a

    def jacobian(self, theta, X) -> np.ndarray:
        """``J[i, p] = d g(x_i) / d theta_p``, shape ``(m, n_params)``."""
        W, b, a = self.unpack(theta)
        X = np.atleast_2d(X)
        h = np.tanh(X @ W.T + b)
        s = a * (1.0 - h * h)
        dW = s[:, :, None] * X[:, None, :]
        return np.concatenate([dW.reshape(len(X), -1), s, h], axis=1)

    def loss(self, theta, X, y) -> float:
        u = self.predict(theta, X) - np.asarray(y, dtype=float)
        return 0.5 * float(u @ u)

    def loss_grad(self, theta, X, y) -> np.ndarray:
        u = self.predict(theta, X) - np.asarray(y, dtype=float)
        return self.jacobian(theta, X).T @ u


def jacobian_fd_error(net: ToyNetwork, theta, X, h: float = 1e-6) -> float:
    """Max abs deviation of :meth:`ToyNetwork.jacobian` from central differences."""
    theta = np.asarray(theta, dtype=float)
    J = net.jacobian(theta, X)
    Jfd = np.empty_like(J)
    for p in range(net.n_params):
        e = np.zeros(net.n_params)
        e[p] = h
        Jfd[:, p] = (net.predict(theta + e, X) - net.predict(theta - e, X)) / (2.0 * h)
    return float(np.max(np.abs(J - Jfd)))


@dataclass(frozen=True)
class GramResult:
    H: np.ndarray
    min_eig: float
    residual: float
    grad_sq: float


def gram_matrix_pl(net: ToyNetwork, X, y, theta) -> GramResult:
    """Assemble ``H_ij = <dg(x_i)/dtheta, dg(x_j)/dtheta>`` and check
    ``|grad f|^2 = u H u^T`` for the squared loss.

    ``residual`` is ``|1/2 |grad f|^2 - 1/2 u H u^T|`` divided by ``1 + |grad f|^2``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    m = len(X)
    if m == 0 or m > 20 or y.shape != (m,):
        raise ValueError("need 1..20 data points with matching targets")
    J = net.jacobian(theta, X)
    H = J @ J.T
    u = net.predict(theta, X) - y
    g = J.T @ u
    gsq = float(g @ g)
    residual = abs(0.5 * gsq - 0.5 * float(u @ H @ u)) / (1.0 + gsq)
    min_eig = float(np.linalg.eigvalsh(H)[0])
    return GramResult(H, min_eig, residual, gsq)


# ---------------------------------------------------------------------------
# step-size threshold surrogates


@dataclass(frozen=True)
class EtaProbe:
    eta1_hat: float
    eta3_hat: float
    eta2_hat: float
    delta_F_hat: float
    grad_F_max_sigma2: float
    grad_F_max_sigma3: float
    L_F_max: float


def hessian_F_many(view: RootView, pts: np.ndarray) -> np.ndarray:
    """``D^2 F = (D^2 f - 2 grad F grad F^T) / (2F)`` at each point."""
    obj = view.base
    F = np.sqrt(obj.eval_many(pts) + obj.shift_c)
    gF = obj.grad_many(pts) / (2.0 * F[:, None])
    Hf = fd_hessian_many(obj, pts)
    return (Hf - 2.0 * gF[:, :, None] * gF[:, None, :]) / (2.0 * F[:, None, None])


def eta_star_probe(obj: Objective, theta0, region=None, grid: int = 201,
                   view: Optional[RootView] = None) -> EtaProbe:
    """Grid surrogates of the step-size thresholds that keep iterates bounded
    and ``r*`` positive.

    The sublevel sets ``{F <= 2 F(theta0)}`` and ``{F <= 3 F(theta0)}`` are
    taken on a grid over ``region``; the convex hull of the latter is replaced
    by the bounding box of its grid points. The modulus of continuity is
    replaced by the Lipschitz bound ``r0 / max |grad F|`` over the larger set.
    """
    if obj.dim > 2:
        raise ValueError("grid probe supports dimension <= 2")
    view = root_view(obj) if view is None else view
    region = obj.box if region is None else np.atleast_2d(np.asarray(region, dtype=float))
    _, _, r0, _ = F_eval_all(view, np.asarray(theta0, dtype=float).reshape(obj.dim))
    pts = grid_points(region, grid)
    F = np.sqrt(obj.eval_many(pts) + obj.shift_c)
    s2 = F <= 2.0 * r0
    s3 = F <= 3.0 * r0
    if not np.any(s2):
        raise InsufficientDataError("no grid point of the region lies in {F <= 2 F(theta0)}")
    gF = np.linalg.norm(obj.grad_many(pts) / (2.0 * F[:, None]), axis=1)
    G2 = float(gF[s2].max())
    G3 = float(gF[s3].max())
    hull = np.stack([pts[s3].min(axis=0), pts[s3].max(axis=0)], axis=1)
    hull_pts = grid_points(hull, grid)
    LF = float(np.max(np.linalg.eigvalsh(hessian_F_many(view, hull_pts))[:, -1]))
    delta_F = r0 / G3 if G3 > 0 else math.inf
    eta1 = delta_F / (2.0 * r0 * G2) if G2 > 0 else math.inf
    eta2 = 2.0 / (r0 * LF) if LF > 0 else math.inf
    eta3 = 2.0 * view.F_star_floor / (r0 * r0 * LF) if LF > 0 else math.inf
    return EtaProbe(eta1, eta3, eta2, delta_F, G2, G3, LF)
