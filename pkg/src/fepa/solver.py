"""Integration of full and lumped fields onto a uniform output grid."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels

RK45 = "rk45"
RK4 = "rk4"


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = RK45
    rtol: float = 1e-8
    atol: float = 1e-10
    h: float = 1e-3
    t_end: float = 100.0
    grid: float = 0.2
    max_steps: int = 50_000_000

    def __post_init__(self):
        if self.method not in (RK45, RK4):
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0 and self.h > 0):
            raise ValueError("step size and tolerances must be positive")
        if not (self.t_end > 0 and self.grid > 0):
            raise ValueError("horizon and grid step must be positive")
        n = round(self.t_end / self.grid)
        if n < 1 or abs(n * self.grid - self.t_end) > 1e-9 * self.t_end:
            raise ValueError(f"grid step {self.grid} does not divide the horizon {self.t_end}")

    def times(self) -> np.ndarray:
        n = round(self.t_end / self.grid)
        return np.arange(n + 1) * self.grid


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # rows: times, columns: names
    names: tuple[str, ...]

    def __post_init__(self):
        self.names = tuple(self.names)
        self._index = {n: i for i, n in enumerate(self.names)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.states[:, self._index[name]]

    def column_sum(self, names: Sequence[str]) -> np.ndarray:
        return self.states[:, [self._index[n] for n in names]].sum(axis=1)

    def clamped(self) -> "Trajectory":
        """Copy with roundoff-negative entries set to zero, for reporting."""
        return Trajectory(self.times, np.maximum(self.states, 0.0), self.names)

    def to_csv(self, path_or_file) -> None:
        close = False
        fh = path_or_file
        if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
            fh = open(path_or_file, "w", newline="", encoding="utf-8")
            close = True
        try:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", *self.names])
            for t, row in zip(self.times, self.states):
                writer.writerow([repr(float(t)), *(repr(float(x)) for x in row)])
        finally:
            if close:
                fh.close()

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "t":
            raise ValueError(f"{path}: first column must be 't'")
        data = np.array([[float(x) for x in row] for row in body], dtype=float).reshape(len(body), len(header))
        return cls(data[:, 0], data[:, 1:], tuple(header[1:]))


def _python_rhs(func: Callable) -> Callable:
    def rhs(y, out, args):
        out[:] = func(y)

    return rhs


def integrate(field, V0, cfg: SolverConfig = SolverConfig(), names: Sequence[str] | None = None) -> Trajectory:
    """Solve dV/dt = field(V) from V0 and sample the solution on ``cfg.times()``.

    ``field`` is a ``VectorField``, a ``LumpedSystem`` or any callable mapping
    a state vector to its derivative.  The compiled path is used for the first
    two; plain callables run the same stepper uninterpreted.
    """
    grid = cfg.times()
    y0 = np.array(V0, dtype=float)
    if hasattr(field, "kernel_args"):
        args = field.kernel_args()
        dopri, rk4 = _kernels.dopri5_jit, _kernels.rk4_jit
        names = names or field.names
    else:
        args = ()
        rhs = _python_rhs(field)
        dopri = _kernels.with_rhs(_kernels.dopri5, rhs)
        rk4 = _kernels.with_rhs(_kernels.rk4, rhs)
        names = names or tuple(f"x{i}" for i in range(len(y0)))
    if len(names) != len(y0):
        raise ValueError(f"initial state has {len(y0)} entries, field has {len(names)} states")
    if not np.all(np.isfinite(y0)):
        raise IntegrationError("initial state is not finite")

    if cfg.method == RK45:
        states, status, t_fail, _, _ = dopri(y0, grid, cfg.rtol, cfg.atol, cfg.max_steps, args)
    else:
        states, status, t_fail = rk4(y0, grid, cfg.h, args)
    if status == _kernels.UNDERFLOW:
        raise IntegrationError(f"step size underflow at t={t_fail:g}")
    if status == _kernels.NONFINITE:
        raise IntegrationError(f"solution became NaN or infinite at t={t_fail:g}")
    if status == _kernels.MAX_STEPS:
        raise IntegrationError(f"step limit {cfg.max_steps} reached at t={t_fail:g}")
    return Trajectory(grid, states, tuple(names))


def _norm(x: np.ndarray, norm: str) -> np.ndarray:
    if norm == "inf":
        return np.abs(x).max(axis=-1)
    if norm == "1":
        return np.abs(x).sum(axis=-1)
    if norm == "2":
        return np.sqrt((x * x).sum(axis=-1))
    raise ValueError(f"unknown norm {norm!r}")


def trajectory_distance(a: Trajectory, b: Trajectory, norm: str = "inf", mapping: dict[str, str] | None = None) -> float:
    """max over the grid of ||a(t) - b(t)||.

    Columns are matched by name; ``mapping`` sends a column of ``a`` to a
    column of ``b`` when the names differ.
    """
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times, rtol=0, atol=1e-9):
        raise ValueError("trajectories are sampled on different grids")
    if mapping is None:
        if set(a.names) != set(b.names):
            raise ValueError("trajectories have different state names; pass a mapping")
        mapping = {n: n for n in a.names}
    left = np.column_stack([a[n] for n in mapping])
    right = np.column_stack([b[mapping[n]] for n in mapping])
    return float(_norm(left - right, norm).max())


def norm(x, kind: str = "inf") -> float:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0.0
    return float(_norm(x, kind))


def residual_norm(field, trajectory: Trajectory, at: int = -1) -> float:
    """||F(V(t))||_inf at one grid index: how close the run is to equilibrium."""
    F = field(trajectory.states[at])
    return float(np.abs(F).max()) if len(F) else 0.0
