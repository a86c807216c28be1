"""Fixed-step RK4 integration on a shared time grid.

Both directions evaluate ``rhs(t, y, i)`` where ``i`` is the index of
the grid interval ``[t_i, t_{i+1}]`` currently being traversed. Inputs
that are piecewise constant on the grid (controls) are looked up with
``i`` and therefore stay fixed across the four stages of a step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import GridError, NonFiniteState, ValidationError

__all__ = [
    "TimeGrid",
    "GridFunction",
    "integrate_forward",
    "integrate_backward_with_resets",
]


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant grid ``t_i = t0 + i * dt`` with ``n_steps`` intervals."""

    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.t_end)):
            raise ValidationError("grid bounds must be finite")
        if not self.t_end > self.t0:
            raise ValidationError(f"t_end={self.t_end} must exceed t0={self.t0}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValidationError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def span(self) -> float:
        return self.t_end - self.t0

    @property
    def dt(self) -> float:
        return self.span / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def snap_tol(self) -> float:
        return 1e-9 * self.span

    def node_index(self, t: float) -> int:
        """Index of the node at time ``t``; raises GridError when off-grid."""
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if i < 0 or i > self.n_steps or abs(x - i) * self.dt > self.snap_tol:
            raise GridError(f"time {t} is not a node of {self}")
        return i

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.t_end, self.n_steps * int(factor))

    @classmethod
    def for_observations(cls, t0, t_end, times=(), max_dt=None, max_factor=200):
        """Build a grid with every observation time on a node.

        The step size respects ``dt <= min(0.01 * span, gap_min / 2)``
        (and ``max_dt`` if given); the step count is then increased until
        all times snap within ``1e-9 * span``.
        """
        span = float(t_end) - float(t0)
        if span <= 0:
            raise ValidationError(f"t_end={t_end} must exceed t0={t0}")
        times = np.sort(np.asarray(times, dtype=float))
        limit = 0.01 * span
        if max_dt is not None:
            limit = min(limit, float(max_dt))
        if times.size:
            pts = np.unique(np.concatenate([[t0], times, [t_end]]))
            gaps = np.diff(pts)
            gaps = gaps[gaps > 1e-9 * span]
            if gaps.size:
                limit = min(limit, 0.5 * gaps.min())
        n_min = max(1, int(math.ceil(span / limit - 1e-9)))
        for n in range(n_min, n_min * max_factor + 1):
            x = (times - t0) * n / span
            if np.all(np.abs(x - np.round(x)) * span / n <= 1e-9 * span):
                return cls(float(t0), float(t_end), n)
        raise GridError(
            f"no grid with at most {n_min * max_factor} steps places all "
            f"observation times on nodes"
        )


@dataclass(frozen=True)
class GridFunction:
    """Values on grid nodes (``n_steps + 1`` rows) or intervals (``n_steps``)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] not in (self.grid.n_steps, self.grid.n_steps + 1):
            raise ValidationError(
                f"{vals.shape[0]} rows do not match grid with {self.grid.n_steps} steps"
            )
        if not np.all(np.isfinite(vals)):
            raise NonFiniteState("grid function contains non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def on_nodes(self) -> bool:
        return self.values.shape[0] == self.grid.n_steps + 1

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i):
        return self.values[i]


def _check(y, step, where):
    if not np.all(np.isfinite(y)):
        raise NonFiniteState(f"non-finite state during {where} at step {step}", step=step)


def integrate_forward(
    rhs: Callable[[float, np.ndarray, int], np.ndarray],
    y0,
    grid: TimeGrid,
    post_step: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
) -> GridFunction:
    """Classical RK4 from ``grid.t0`` to ``grid.t_end``.

    ``post_step(i, y)`` may replace the state reached at node ``i``
    (used for the covariance clamp).
    """
    y = np.array(y0, dtype=float).ravel()
    _check(y, 0, "forward integration")
    dt = grid.dt
    out = np.empty((grid.n_steps + 1, y.size))
    out[0] = y
    for i in range(grid.n_steps):
        t = grid.t0 + i * dt
        k1 = np.asarray(rhs(t, y, i), dtype=float)
        _check(k1, i, "forward integration")
        k2 = np.asarray(rhs(t + 0.5 * dt, y + 0.5 * dt * k1, i), dtype=float)
        _check(k2, i, "forward integration")
        k3 = np.asarray(rhs(t + 0.5 * dt, y + 0.5 * dt * k2, i), dtype=float)
        _check(k3, i, "forward integration")
        k4 = np.asarray(rhs(t + dt, y + dt * k3, i), dtype=float)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check(y, i + 1, "forward integration")
        if post_step is not None:
            y = np.asarray(post_step(i + 1, y), dtype=float)
        out[i + 1] = y
    return GridFunction(grid, out)


def integrate_backward_with_resets(
    rhs: Callable[[float, np.ndarray, int], np.ndarray],
    terminal,
    grid: TimeGrid,
    resets: Optional[Mapping[int, Callable[[np.ndarray], np.ndarray]]] = None,
) -> GridFunction:
    """RK4 for ``dy/dt = rhs`` from ``t_end`` down to ``t0`` with jumps.

    At a reset node ``k`` the jump ``y <- resets[k](y)`` is applied once,
    before integration continues to earlier times. The stored value at a
    reset node is the post-jump (left-limit) value.
    """
    resets = dict(resets or {})
    for k in resets:
        if not 0 <= int(k) <= grid.n_steps:
            raise ValidationError(f"reset index {k} outside grid")
    resets = {int(k): f for k, f in resets.items()}
    y = np.array(terminal, dtype=float).ravel()
    n = grid.n_steps
    dt = grid.dt
    if n in resets:
        y = np.asarray(resets[n](y), dtype=float)
    _check(y, n, "backward integration")
    out = np.empty((n + 1, y.size))
    out[n] = y
    for i in range(n - 1, -1, -1):
        t = grid.t0 + (i + 1) * dt
        k1 = np.asarray(rhs(t, y, i), dtype=float)
        _check(k1, i, "backward integration")
        k2 = np.asarray(rhs(t - 0.5 * dt, y - 0.5 * dt * k1, i), dtype=float)
        _check(k2, i, "backward integration")
        k3 = np.asarray(rhs(t - 0.5 * dt, y - 0.5 * dt * k2, i), dtype=float)
        _check(k3, i, "backward integration")
        k4 = np.asarray(rhs(t - dt, y - dt * k3, i), dtype=float)
        y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if i in resets:
            y = np.asarray(resets[i](y), dtype=float)
        _check(y, i, "backward integration")
        out[i] = y
    return GridFunction(grid, out)
