"""Objective functions, the shifted square root ``F = sqrt(f + c)`` and
finite-difference oracles.

Builtin objectives are vectorised: ``eval`` maps an array of shape ``(..., n)``
to ``(...)`` and ``grad`` maps it to ``(..., n)``, so grid diagnostics can
evaluate many points at once.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray

FD_STEP = 1e-5
POWER_ITER_CAP = 500
POWER_ITER_TOL = 1e-10


class DomainError(ValueError):
    """Raised when ``f(theta) + c <= 0``, i.e. the shift ``c`` is too small."""


class UnknownObjectiveError(KeyError):
    pass


class PowerIterationError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Objective:
    """A differentiable objective ``f: R^n -> R``.

    ``box`` is the working box, shape ``(n, 2)``, on which region-restricted
    quantities (Hessian bound, PL constant, grid probes) are computed.
    """

    name: str
    dim: int
    eval: Callable[[Array], Array]
    grad: Callable[[Array], Array]
    shift_c: float = 1.0
    known_fstar: Optional[float] = None
    known_minimizers: Optional[list] = None
    box: Optional[Array] = None
    batched: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")

    def eval_many(self, points: Array) -> Array:
        points = np.asarray(points, dtype=float)
        if self.batched:
            return np.asarray(self.eval(points), dtype=float)
        flat = points.reshape(-1, self.dim)
        out = np.array([float(self.eval(p)) for p in flat])
        return out.reshape(points.shape[:-1])

    def grad_many(self, points: Array) -> Array:
        points = np.asarray(points, dtype=float)
        if self.batched:
            return np.asarray(self.grad(points), dtype=float)
        flat = points.reshape(-1, self.dim)
        out = np.array([np.asarray(self.grad(p), dtype=float) for p in flat])
        return out.reshape(points.shape)


@dataclass(frozen=True)
class RootView:
    """``F = sqrt(f + c)`` over an objective, with the floor ``F* > 0``."""

    base: Objective
    F_star_floor: float

    def __post_init__(self):
        if not self.F_star_floor > 0:
            raise ValueError("F_star_floor must be positive")

    @property
    def c(self) -> float:
        return self.base.shift_c


def default_shift(fstar_lower_bound: Optional[float]) -> float:
    """``c = 1`` when the lower bound is non-negative, else ``1 - bound``."""
    if fstar_lower_bound is None or fstar_lower_bound >= 0:
        return 1.0
    return 1.0 - fstar_lower_bound


def root_view(obj: Objective, F_star_floor: Optional[float] = None) -> RootView:
    """Build the root view of ``obj``; the floor defaults to ``sqrt(f* + c)``."""
    if F_star_floor is None:
        if obj.known_fstar is None:
            raise ValueError(f"objective {obj.name!r} has no known f*; pass F_star_floor")
        F_star_floor = math.sqrt(obj.known_fstar + obj.shift_c)
    return RootView(obj, float(F_star_floor))


def _shifted(view: RootView, f: float, theta) -> float:
    s = f + view.base.shift_c
    if not s > 0:
        raise DomainError(
            f"f(theta) + c = {s!r} <= 0 at theta={np.asarray(theta).tolist()} "
            f"(objective {view.base.name!r}, c={view.base.shift_c})"
        )
    return s


def F_value(view: RootView, theta) -> float:
    theta = np.asarray(theta, dtype=float)
    f = float(view.base.eval(theta))
    return math.sqrt(_shifted(view, f, theta))


def F_grad(view: RootView, theta) -> Array:
    """``grad F = grad f / (2F)``."""
    theta = np.asarray(theta, dtype=float)
    f = float(view.base.eval(theta))
    F = math.sqrt(_shifted(view, f, theta))
    return np.asarray(view.base.grad(theta), dtype=float) / (2.0 * F)


def F_eval_all(view: RootView, theta: Array) -> tuple[float, Array, float, Array]:
    """Return ``(f, grad f, F, grad F)`` from a single pair of evaluations."""
    f = float(view.base.eval(theta))
    g = np.asarray(view.base.grad(theta), dtype=float)
    F = math.sqrt(_shifted(view, f, theta))
    return f, g, F, g / (2.0 * F)


# ---------------------------------------------------------------------------
# builtins


def _quadratic(n: int) -> Objective:
    return Objective(
        name="quadratic" if n == 1 else f"quadratic_{n}",
        dim=n,
        eval=lambda t: np.sum(np.square(t), axis=-1),
        grad=lambda t: 2.0 * np.asarray(t, dtype=float),
        shift_c=default_shift(0.0),
        known_fstar=0.0,
        known_minimizers=[np.zeros(n)],
        box=np.tile([-5.0, 5.0], (n, 1)),
        batched=True,
    )


def _shifted_quadratic(n: int) -> Objective:
    # minimiser at (1, ..., 1), negative minimum value exercises the shift rule
    center, fmin = 1.0, -3.0
    return Objective(
        name="shifted_quadratic" if n == 1 else f"shifted_quadratic_{n}",
        dim=n,
        eval=lambda t: np.sum(np.square(np.asarray(t) - center), axis=-1) + fmin,
        grad=lambda t: 2.0 * (np.asarray(t, dtype=float) - center),
        shift_c=default_shift(fmin),
        known_fstar=fmin,
        known_minimizers=[np.full(n, center)],
        box=np.tile([center - 5.0, center + 5.0], (n, 1)),
        batched=True,
    )


def _quartic(n: int) -> Objective:
    def ev(t):
        s = np.sum(np.square(t), axis=-1)
        return s * s

    def gr(t):
        t = np.asarray(t, dtype=float)
        s = np.sum(t * t, axis=-1, keepdims=True)
        return 4.0 * s * t

    return Objective(
        name="quartic" if n == 1 else f"quartic_{n}",
        dim=n,
        eval=ev,
        grad=gr,
        shift_c=default_shift(0.0),
        known_fstar=0.0,
        known_minimizers=[np.zeros(n)],
        box=np.tile([-2.0, 2.0], (n, 1)),
        batched=True,
    )


def _pl_sine() -> Objective:
    # non-convex, PL with mu = 1/32
    def ev(t):
        x = np.asarray(t)[..., 0]
        return x * x + 3.0 * np.sin(x) ** 2

    def gr(t):
        t = np.asarray(t, dtype=float)
        return 2.0 * t + 3.0 * np.sin(2.0 * t)

    return Objective(
        name="pl_sine",
        dim=1,
        eval=ev,
        grad=gr,
        shift_c=default_shift(0.0),
        known_fstar=0.0,
        known_minimizers=[np.zeros(1)],
        box=np.array([[-10.0, 10.0]]),
        batched=True,
    )


def _rosenbrock2d() -> Objective:
    def ev(t):
        t = np.asarray(t)
        x, y = t[..., 0], t[..., 1]
        return (1.0 - x) ** 2 + 100.0 * (y - x * x) ** 2

    def gr(t):
        t = np.asarray(t, dtype=float)
        x, y = t[..., 0], t[..., 1]
        w = y - x * x
        return np.stack([-2.0 * (1.0 - x) - 400.0 * x * w, 200.0 * w], axis=-1)

    return Objective(
        name="rosenbrock2d",
        dim=2,
        eval=ev,
        grad=gr,
        shift_c=default_shift(0.0),
        known_fstar=0.0,
        known_minimizers=[np.ones(2)],
        box=np.array([[-2.0, 2.0], [-2.0, 2.0]]),
        batched=True,
    )


_FIXED = {"pl_sine": _pl_sine, "rosenbrock2d": _rosenbrock2d}
_SIZED = {"quadratic": _quadratic, "quartic": _quartic, "shifted_quadratic": _shifted_quadratic}
_SIZED_RE = re.compile(r"^(quadratic|quartic|shifted_quadratic)(?:_(\d+))?$")

BUILTIN_NAMES = ("quadratic", "quadratic_<n>", "quartic", "quartic_<n>",
                 "shifted_quadratic", "shifted_quadratic_<n>", "pl_sine", "rosenbrock2d")


def make_builtin(name: str, dim: Optional[int] = None) -> Objective:
    """Look up a builtin objective by name.

    Dimension-generic families accept either a ``_<n>`` suffix
    (``"quadratic_3"``) or the ``dim`` argument; both default to 1.
    """
    if name in _FIXED:
        obj = _FIXED[name]()
        if dim is not None and dim != obj.dim:
            raise ValueError(f"{name} has fixed dimension {obj.dim}")
        return obj
    m = _SIZED_RE.match(name)
    if m is None:
        raise UnknownObjectiveError(f"unknown objective {name!r}; known: {', '.join(BUILTIN_NAMES)}")
    n = int(m.group(2)) if m.group(2) else (dim or 1)
    if m.group(2) and dim is not None and dim != n:
        raise ValueError(f"conflicting dimension for {name!r}: {dim}")
    return _SIZED[m.group(1)](n)


# ---------------------------------------------------------------------------
# finite-difference oracles


def fd_grad(obj: Objective, theta, h: float = FD_STEP) -> Array:
    theta = np.asarray(theta, dtype=float)
    out = np.empty(obj.dim)
    for i in range(obj.dim):
        e = np.zeros(obj.dim)
        e[i] = h
        out[i] = (float(obj.eval(theta + e)) - float(obj.eval(theta - e))) / (2.0 * h)
    return out


def fd_grad_check(obj: Objective, theta, h: float = FD_STEP) -> float:
    """Max deviation between the analytic gradient and central differences,
    relative to ``max(|grad|_inf, 1)``."""
    if not h > 0:
        raise ValueError("h must be positive")
    g = np.asarray(obj.grad(np.asarray(theta, dtype=float)), dtype=float)
    d = fd_grad(obj, theta, h)
    return float(np.max(np.abs(g - d)) / max(float(np.max(np.abs(g))), 1.0))


def fd_hessian(obj: Objective, theta, h: float = FD_STEP) -> Array:
    """Symmetrised Hessian from central differences of the gradient."""
    theta = np.asarray(theta, dtype=float)
    n = obj.dim
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (np.asarray(obj.grad(theta + e)) - np.asarray(obj.grad(theta - e))) / (2.0 * h)
    return 0.5 * (H + H.T)


def fd_hessian_many(obj: Objective, points: Array, h: float = FD_STEP) -> Array:
    """Batched :func:`fd_hessian`; ``points`` has shape ``(m, n)``."""
    points = np.asarray(points, dtype=float)
    n = obj.dim
    H = np.empty(points.shape[:-1] + (n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[..., :, i] = (obj.grad_many(points + e) - obj.grad_many(points - e)) / (2.0 * h)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def largest_eigenvalue(A: Array, cap: int = POWER_ITER_CAP, tol: float = POWER_ITER_TOL) -> float:
    """Largest (algebraic) eigenvalue of a symmetric matrix by power iteration.

    The matrix is shifted by a Gershgorin bound so the top of the spectrum is
    also the eigenvalue of largest magnitude.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n == 1:
        return float(A[0, 0])
    radius = np.sum(np.abs(A), axis=1) - np.abs(np.diag(A))
    shift = max(0.0, -float(np.min(np.diag(A) - radius)))
    B = A + shift * np.eye(n)
    x = np.ones(n) / math.sqrt(n) + 1e-3 * np.arange(n)
    x /= np.linalg.norm(x)
    rq = float(x @ B @ x)
    for _ in range(cap):
        y = B @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return -shift
        x = y / ny
        rq_new = float(x @ B @ x)
        if abs(rq_new - rq) <= tol * max(1.0, abs(rq_new)):
            return rq_new - shift
        rq = rq_new
    residual = float(np.linalg.norm(B @ x - rq * x))
    raise PowerIterationError("power iteration did not converge", residual)


def grid_points(region, samples: int) -> Array:
    """Tensor grid with ``samples`` points per axis, endpoints included."""
    region = np.atleast_2d(np.asarray(region, dtype=float))
    axes = [np.linspace(lo, hi, samples) for lo, hi in region]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def hessian_max_eig(obj: Objective, region=None, samples: int = 201) -> float:
    """Estimate of ``L``: the max over a grid on ``region`` of the largest
    Hessian eigenvalue."""
    region = obj.box if region is None else region
    if samples < 1:
        raise ValueError("samples must be positive")
    pts = grid_points(region, samples)
    if pts.size == 0:
        raise ValueError("empty region")
    Hs = fd_hessian_many(obj, pts)
    return max(largest_eigenvalue(H) for H in Hs)
