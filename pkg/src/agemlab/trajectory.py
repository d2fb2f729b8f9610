"""Columnar trajectory records shared by the discrete and continuous runners."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

COLUMNS_TAIL = ("r", "v_norm", "f", "grad_f_norm", "Q", "E_opt", "identity_residual")


@dataclass(frozen=True)
class StepRecord:
    k: float
    theta: np.ndarray
    r: float
    v_norm: float
    f: float
    grad_f_norm: float
    Q: float
    identity_residual: float


@dataclass
class Trajectory:
    """Time-indexed samples of a run.

    ``time`` holds the step counter for discrete runs and ``t`` for ODE runs.
    ``v`` is the full momentum vector when known; it is not serialised, so a
    trajectory read back from disk carries ``v=None``. Columns that do not
    apply to a method (``r`` for GD, ``E_opt`` unless computed) are NaN.
    """

    time: np.ndarray
    theta: np.ndarray
    r: np.ndarray
    v_norm: np.ndarray
    f: np.ndarray
    grad_f_norm: np.ndarray
    Q: np.ndarray
    E_opt: np.ndarray
    identity_residual: np.ndarray
    v: Optional[np.ndarray] = None
    method: str = ""
    objective: str = ""
    continuous: bool = False
    error: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.time)

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    @property
    def ok(self) -> bool:
        return self.error is None

    def record(self, i: int) -> StepRecord:
        return StepRecord(
            k=float(self.time[i]),
            theta=self.theta[i].copy(),
            r=float(self.r[i]),
            v_norm=float(self.v_norm[i]),
            f=float(self.f[i]),
            grad_f_norm=float(self.grad_f_norm[i]),
            Q=float(self.Q[i]),
            identity_residual=float(self.identity_residual[i]),
        )

    def final(self) -> StepRecord:
        return self.record(len(self) - 1)

    def columns(self) -> list[str]:
        return ["k_or_t"] + [f"theta_{i}" for i in range(self.dim)] + list(COLUMNS_TAIL)

    def as_matrix(self) -> np.ndarray:
        return np.column_stack(
            [self.time, self.theta] + [getattr(self, c) for c in COLUMNS_TAIL]
        ) if len(self) else np.empty((0, len(self.columns())))

    @classmethod
    def empty(cls, dim: int, **kw) -> "Trajectory":
        z = np.empty(0)
        return cls(time=z, theta=np.empty((0, dim)), r=z, v_norm=z, f=z, grad_f_norm=z,
                   Q=z, E_opt=z, identity_residual=z, **kw)


class TrajectoryBuilder:
    """Accumulates rows in lists and freezes them into a :class:`Trajectory`."""

    def __init__(self, dim: int, keep_v: bool = True):
        self.dim = dim
        self.keep_v = keep_v
        self.rows: dict[str, list] = {k: [] for k in
                                      ("time", "theta", "v", "r", "v_norm", "f",
                                       "grad_f_norm", "Q", "E_opt", "identity_residual")}

    def add(self, time, theta, v, r, f, grad_f_norm, Q, identity_residual=np.nan, E_opt=np.nan):
        rows = self.rows
        rows["time"].append(time)
        rows["theta"].append(np.array(theta, dtype=float))
        vn = np.nan
        if v is not None:
            vn = float(np.sqrt(np.dot(v, v)))
            if self.keep_v:
                rows["v"].append(np.array(v, dtype=float))
        rows["v_norm"].append(vn)
        rows["r"].append(r)
        rows["f"].append(f)
        rows["grad_f_norm"].append(grad_f_norm)
        rows["Q"].append(Q)
        rows["E_opt"].append(E_opt)
        rows["identity_residual"].append(identity_residual)

    def build(self, **kw) -> Trajectory:
        rows = self.rows
        n = len(rows["time"])
        arr = lambda k: np.asarray(rows[k], dtype=float)
        theta = np.asarray(rows["theta"], dtype=float).reshape(n, self.dim)
        v = None
        if self.keep_v and len(rows["v"]) == n:
            v = np.asarray(rows["v"], dtype=float).reshape(n, self.dim)
        return Trajectory(time=arr("time"), theta=theta, r=arr("r"), v_norm=arr("v_norm"),
                          f=arr("f"), grad_f_norm=arr("grad_f_norm"), Q=arr("Q"),
                          E_opt=arr("E_opt"), identity_residual=arr("identity_residual"),
                          v=v, **kw)
