"""Periodic space grids, space-time grids and the backward-solution container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .paths import TimeGrid


@dataclass(frozen=True)
class SpaceGrid:
    """Periodic grid with ``N`` points per axis on ``[0, L)^n``."""

    N: int
    L: float = 2 * np.pi
    n: int = 1

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("only n = 1 or 2 is supported")
        if self.N < 4:
            raise ValueError("space grid needs at least 4 points")
        if not self.L > 0:
            raise ValueError("period must be positive")

    @property
    def dx(self) -> float:
        return self.L / self.N

    @property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(self.N)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    def mesh(self):
        """Coordinates broadcastable to ``shape``: ``x`` or a pair ``(X, Y)``."""
        if self.n == 1:
            return self.x
        return tuple(np.meshgrid(self.x, self.x, indexing="ij"))

    def wavenumbers(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.N, d=self.dx)


@dataclass(frozen=True)
class SpaceTimeGrid:
    space: SpaceGrid
    time: TimeGrid

    @property
    def T(self) -> float:
        return self.time.t_end

    @classmethod
    def make(cls, N: int, M: int, T: float = 1.0, L: float = 2 * np.pi, n: int = 1) -> "SpaceTimeGrid":
        return cls(SpaceGrid(N, L, n), TimeGrid(T, M))


def diff_periodic(w: np.ndarray, h: float, order: int, axis: int = -1) -> np.ndarray:
    """Fourth-order central differences on a periodic axis."""
    r = lambda k: np.roll(w, -k, axis=axis)
    if order == 1:
        return (-r(2) + 8 * r(1) - 8 * r(-1) + r(-2)) / (12 * h)
    if order == 2:
        return (-r(2) + 16 * r(1) - 30 * w + 16 * r(-1) - r(-2)) / (12 * h * h)
    raise ValueError("order must be 1 or 2")


def diff2_periodic(w: np.ndarray, h: float, order: int, axis: int = -1) -> np.ndarray:
    """Second-order centred stencils, identical to the ones the solver uses."""
    r = lambda k: np.roll(w, -k, axis=axis)
    if order == 1:
        return (r(1) - r(-1)) / (2 * h)
    if order == 2:
        return (r(1) - 2 * w + r(-1)) / (h * h)
    raise ValueError("order must be 1 or 2")


@dataclass
class BackwardSolution:
    """``w`` of shape ``(..., M + 1, *space)``; index ``k`` is time ``t_k``."""

    grid: SpaceTimeGrid
    w: np.ndarray
    info: dict | None = None

    @property
    def n(self) -> int:
        return self.grid.space.n

    @property
    def time_axis(self) -> int:
        return self.w.ndim - 1 - self.n

    def _space_axis(self, i: int) -> int:
        return self.w.ndim - self.n + i

    def terminal(self) -> np.ndarray:
        return np.take(self.w, -1, axis=self.time_axis)

    def slice(self, k: int) -> np.ndarray:
        return np.take(self.w, k, axis=self.time_axis)

    def dx(self, axis: int = 0) -> np.ndarray:
        return diff_periodic(self.w, self.grid.space.dx, 1, self._space_axis(axis))

    def dxx(self, axis: int = 0) -> np.ndarray:
        return diff_periodic(self.w, self.grid.space.dx, 2, self._space_axis(axis))

    def dxy(self) -> np.ndarray:
        if self.n != 2:
            raise ValueError("mixed derivative needs n = 2")
        h = self.grid.space.dx
        return diff_periodic(diff_periodic(self.w, h, 1, self._space_axis(0)), h, 1, self._space_axis(1))

    def dt(self) -> np.ndarray:
        return np.gradient(self.w, self.grid.time.dt, axis=self.time_axis, edge_order=2)
