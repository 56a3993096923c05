"""Discretized Brownian paths: seeded generation, Cameron-Martin shifts and
Girsanov reweighting.

Paths are stored as increments on a uniform grid; values are prefix sums.
Every path is drawn from its own Philox stream keyed by
``(seed, path_index, stream)`` so an ensemble is a pure function of its
seed and does not depend on generation order or worker count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "TimeGrid",
    "SeedSpec",
    "BrownianPath",
    "BrownianEnsemble",
    "CameronMartinDirection",
    "make_rng",
    "sample_ensemble",
    "shift_path",
    "girsanov_density",
    "coarsen",
    "write_path_csv",
]

# streams reserved by the library; user code may use any other integer
OUTER_STREAM = 0
INNER_STREAM = 1
COMMON_INNER_STREAM = 2


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = t_start + k * dt`` on ``[t_start, t_end]``."""

    t_end: float = 1.0
    steps: int = 1
    t_start: float = 0.0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        if not (self.t_end > self.t_start):
            raise ValueError("degenerate grid: t_end must exceed t_start")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.steps + 1)

    def index(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        k = (t - self.t_start) / self.dt
        kr = int(round(k))
        if abs(k - kr) > 1e-9 or not 0 <= kr <= self.steps:
            raise ValueError(f"time {t} is not on the grid")
        return kr

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_end, self.steps * factor, self.t_start)


@dataclass(frozen=True)
class SeedSpec:
    seed: int
    path_index: int = 0
    stream: int = 0

    def seed_sequence(self, *extra: int) -> np.random.SeedSequence:
        key = (int(self.path_index), int(self.stream)) + tuple(int(e) for e in extra)
        return np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=key)


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``key``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class BrownianPath:
    grid: TimeGrid
    increments: np.ndarray  # (M, d)

    def __post_init__(self):
        self.increments = np.asarray(self.increments, dtype=float)
        if self.increments.ndim != 2 or self.increments.shape[0] != self.grid.steps:
            raise ValueError("increments must have shape (steps, d)")
        if not np.all(np.isfinite(self.increments)):
            raise ValueError("increments must be finite")

    @property
    def d(self) -> int:
        return self.increments.shape[-1]

    def values(self) -> np.ndarray:
        """Path values on the grid, shape ``(M + 1, d)``, starting at 0."""
        return _prefix(self.increments)

    def with_increments(self, increments: np.ndarray) -> "BrownianPath":
        return BrownianPath(self.grid, increments)


@dataclass
class BrownianEnsemble:
    """``count`` paths stacked along axis 0: increments of shape ``(P, M, d)``."""

    grid: TimeGrid
    increments: np.ndarray
    seed: int | None = None
    path_indices: np.ndarray | None = None

    def __post_init__(self):
        self.increments = np.asarray(self.increments, dtype=float)
        if self.increments.ndim != 3 or self.increments.shape[1] != self.grid.steps:
            raise ValueError("increments must have shape (count, steps, d)")
        if self.path_indices is None:
            self.path_indices = np.arange(self.increments.shape[0])

    def __len__(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[-1]

    def values(self) -> np.ndarray:
        return _prefix(self.increments)

    def path(self, i: int) -> BrownianPath:
        return BrownianPath(self.grid, self.increments[i])

    def with_increments(self, increments: np.ndarray) -> "BrownianEnsemble":
        return BrownianEnsemble(self.grid, increments, self.seed, self.path_indices)

    def subset(self, idx) -> "BrownianEnsemble":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return BrownianEnsemble(self.grid, self.increments[idx], self.seed, self.path_indices[idx])


PathLike = Union[BrownianPath, BrownianEnsemble]


def _prefix(increments: np.ndarray) -> np.ndarray:
    shape = increments.shape[:-2] + (1, increments.shape[-1])
    return np.concatenate([np.zeros(shape), np.cumsum(increments, axis=-2)], axis=-2)


@dataclass
class CameronMartinDirection:
    """Step function on a grid with values in R^d, ``values[k]`` on ``[t_k, t_{k+1})``."""

    grid: TimeGrid
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.steps:
            raise ValueError("direction must have one value per grid interval")
        self.values = v

    @classmethod
    def constant(cls, grid: TimeGrid, value: float = 1.0, d: int = 1) -> "CameronMartinDirection":
        return cls(grid, np.full((grid.steps, d), float(value)))

    @classmethod
    def from_function(cls, grid: TimeGrid, h, d: int = 1) -> "CameronMartinDirection":
        """Left-point samples of ``h(t)``."""
        t = grid.times[:-1]
        vals = np.asarray(np.broadcast_to(h(t), (d, grid.steps)) if d > 1 else h(t), dtype=float)
        return cls(grid, vals.T if d > 1 else vals)

    @property
    def norm_sq(self) -> float:
        return float(np.sum(self.values**2) * self.grid.dt)

    def integral(self) -> np.ndarray:
        """``int_0^T h ds`` per coordinate."""
        return self.values.sum(axis=0) * self.grid.dt

    def inner(self, g: np.ndarray) -> np.ndarray:
        """H inner product with a step function ``g`` of shape ``(..., M, d)``."""
        return np.sum(g * self.values, axis=(-2, -1)) * self.grid.dt


def sample_ensemble(seed: SeedSpec | int, count: int, grid: TimeGrid, d: int = 1) -> BrownianEnsemble:
    """Draw ``count`` independent paths; path ``i`` uses stream ``(seed.path_index + i, seed.stream)``."""
    if isinstance(seed, (int, np.integer)):
        seed = SeedSpec(int(seed))
    if count < 1:
        raise ValueError("count must be >= 1")
    if d < 1:
        raise ValueError("d must be >= 1")
    sq = math.sqrt(grid.dt)
    out = np.empty((count, grid.steps, d))
    for i in range(count):
        rng = make_rng(seed.seed, seed.path_index + i, seed.stream)
        out[i] = rng.standard_normal((grid.steps, d)) * sq
    idx = seed.path_index + np.arange(count)
    return BrownianEnsemble(grid, out, seed.seed, idx)


def _check_grid(path: PathLike, h: CameronMartinDirection):
    if path.grid != h.grid or h.values.shape[-1] != path.d:
        raise ValueError("direction and path live on different grids")


def shift_path(path: PathLike, h: CameronMartinDirection, eps: float) -> PathLike:
    """``omega -> omega + eps * int_0^. h ds`` on the grid."""
    _check_grid(path, h)
    return path.with_increments(path.increments + eps * h.values * path.grid.dt)


def girsanov_density(path: PathLike, h: CameronMartinDirection, theta: float):
    """``exp(theta * sum h dW - theta^2/2 |h|_H^2)``; per path for an ensemble."""
    _check_grid(path, h)
    stoch = np.sum(h.values * path.increments, axis=(-2, -1))
    expo = theta * stoch - 0.5 * theta**2 * h.norm_sq
    if np.any(expo > np.log(np.finfo(float).max)):
        raise OverflowError("Girsanov exponent overflows double precision")
    dens = np.exp(expo)
    return float(dens) if np.ndim(dens) == 0 else dens


def coarsen(path: PathLike, factor: int) -> PathLike:
    """Sum consecutive increments; the coarse path agrees with the fine one on the coarse grid."""
    m = path.grid.steps
    if m % factor:
        raise ValueError("factor must divide the number of steps")
    grid = TimeGrid(path.grid.t_end, m // factor, path.grid.t_start)
    inc = path.increments
    inc = inc.reshape(inc.shape[:-2] + (m // factor, factor, inc.shape[-1])).sum(axis=-2)
    if isinstance(path, BrownianEnsemble):
        return BrownianEnsemble(grid, inc, path.seed, path.path_indices)
    return BrownianPath(grid, inc)


def write_path_csv(path: BrownianPath, file) -> None:
    """Header ``t,w_1..w_d``; one row per grid point, 17 significant digits."""
    vals = path.values()
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"w_{i + 1}" for i in range(path.d)])
        for t, row in zip(path.grid.times, vals):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
