"""Gaussian semigroup for a time-dependent, space-independent diffusion matrix.

``P_{t,s} f = p_{t,s} * f`` with ``p_{t,s}(x) = (det 4 pi A)^(-1/2) exp(-<x, A^-1 x>/4)``
and ``A = A_{t,s} = int_t^s a(r) dr``.  Its Fourier multiplier is
``exp(-<xi, A xi>)``, which is what the periodic implementation applies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erfc

from .grids import BackwardSolution, SpaceTimeGrid, diff2_periodic

MASS_TOLERANCE = 1e-8


class KernelError(ValueError):
    pass


@dataclass
class DiffusionSchedule:
    a: Callable[[float], object]
    lam_min: float
    lam_max: float
    n: int = 1

    def __post_init__(self):
        if not 0 < self.lam_min <= self.lam_max:
            raise KernelError("need 0 < lam_min <= lam_max")
        self.check()

    @classmethod
    def constant(cls, value, n: int = 1) -> "DiffusionSchedule":
        m = np.atleast_2d(np.asarray(value, dtype=float))
        if m.shape == (1, 1) and n == 2:
            m = m[0, 0] * np.eye(2)
        ev = np.linalg.eigvalsh(m)
        return cls(lambda t, m=m: m, float(ev.min()), float(ev.max()), n)

    def matrix(self, t: float) -> np.ndarray:
        m = np.atleast_2d(np.asarray(self.a(t), dtype=float))
        if m.shape != (self.n, self.n):
            raise KernelError(f"a(t) must be {self.n}x{self.n}")
        return m

    def check(self, probes: int = 33) -> None:
        """Ellipticity on a probe lattice of times."""
        for t in np.linspace(0.0, 1.0, probes):
            m = self.matrix(t)
            if not np.allclose(m, m.T, atol=1e-14):
                raise KernelError(f"a({t}) is not symmetric")
            ev = np.linalg.eigvalsh(m)
            if ev.min() < self.lam_min * (1 - 1e-12) or ev.max() > self.lam_max * (1 + 1e-12):
                raise KernelError(f"ellipticity bounds violated at t={t}: eigenvalues {ev}")


@dataclass(frozen=True)
class KernelAccumulator:
    A: np.ndarray
    t: float
    s: float
    rule: str = "composite-simpson"


def _simpson(sched: DiffusionSchedule, t: float, s: float, panels: int) -> np.ndarray:
    r = np.linspace(t, s, 2 * panels + 1)
    vals = np.array([sched.matrix(ri) for ri in r])
    w = np.ones(2 * panels + 1)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    return np.tensordot(w, vals, axes=1) * (s - t) / (6 * panels)


def accumulate_A(sched: DiffusionSchedule, t: float, s: float, panels: int = 64) -> KernelAccumulator:
    if not t < s:
        raise KernelError("need t < s")
    A = _simpson(sched, t, s, panels)
    A = 0.5 * (A + A.T)
    return KernelAccumulator(A, float(t), float(s), f"composite-simpson-{panels}")


def kernel_eval(acc: KernelAccumulator, x) -> np.ndarray:
    A = acc.A
    n = A.shape[0]
    det = np.linalg.det(4 * np.pi * A)
    if not det > 0:
        raise KernelError("A is singular")
    x = np.asarray(x, dtype=float)
    if n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    q = np.einsum("...i,ij,...j->...", x, np.linalg.inv(A), x)
    return det**-0.5 * np.exp(-q / 4)


def tail_mass(acc: KernelAccumulator, half_width: float) -> float:
    """Upper bound on kernel mass outside the centred box of half-width ``half_width``."""
    var = 2 * np.diag(acc.A)
    return float(np.sum(erfc(half_width / np.sqrt(2 * var))))


def multiplier(A: np.ndarray, xi: np.ndarray, n: int) -> np.ndarray:
    """exp(-<xi, A xi>) on the FFT lattice; ``A`` may be stacked ``(..., n, n)``."""
    A = np.asarray(A, dtype=float)
    if n == 1:
        return np.exp(-A[..., 0, 0][..., None] * xi**2)
    k1, k2 = np.meshgrid(xi, xi, indexing="ij")
    q = (
        A[..., 0, 0, None, None] * k1**2
        + 2 * A[..., 0, 1, None, None] * k1 * k2
        + A[..., 1, 1, None, None] * k2**2
    )
    return np.exp(-q)


def _fftn(f, n):
    return np.fft.fftn(f, axes=tuple(range(-n, 0)))


def _ifftn(f, n):
    return np.fft.ifftn(f, axes=tuple(range(-n, 0))).real


def semigroup_apply(acc: KernelAccumulator, f, L: float) -> np.ndarray:
    """Periodic convolution with ``p_{t,s}``; ``f`` has shape ``(..., N)`` or ``(..., N, N)``."""
    n = acc.A.shape[0]
    f = np.asarray(f, dtype=float)
    if tail_mass(acc, L / 2) > MASS_TOLERANCE:
        raise KernelError("kernel too wide for the period")
    N = f.shape[-1]
    xi = 2 * np.pi * np.fft.fftfreq(N, d=L / N)
    return _ifftn(_fftn(f, n) * multiplier(acc.A, xi, n), n)


class _CumulativeA:
    """Phi(r) = int_0^r a, tabulated and read back by cubic Hermite interpolation."""

    def __init__(self, sched: DiffusionSchedule, T: float, cells: int = 1024):
        self.sched = sched
        self.h = T / cells
        self.r = np.linspace(0.0, T, cells + 1)
        mid = self.r[:-1] + self.h / 2
        av = np.array([sched.matrix(t) for t in self.r])
        am = np.array([sched.matrix(t) for t in mid])
        inc = self.h / 6 * (av[:-1] + 4 * am + av[1:])
        self.phi = np.concatenate([np.zeros((1,) + inc.shape[1:]), np.cumsum(inc, axis=0)])
        self.a = av
        self.const = bool(np.allclose(av, av[0], rtol=0, atol=0))

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.const:
            return s[..., None, None] * self.a[0]
        k = np.clip(np.floor(s / self.h).astype(int), 0, len(self.r) - 2)
        u = ((s - self.r[k]) / self.h)[..., None, None]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        return h00 * self.phi[k] + h10 * self.h * self.a[k] + h01 * self.phi[k + 1] + h11 * self.h * self.a[k + 1]


def _source_hat(f, grid: SpaceTimeGrid):
    """Return ``s -> fft(f_s)`` for a callable ``f(s, x)`` or an array on the time grid."""
    n = grid.space.n
    mesh = grid.space.mesh()
    shape = grid.space.shape
    if callable(f):
        def hat(s):
            out = []
            for si in np.atleast_1d(s):
                val = f(si, *mesh) if n == 2 else f(si, mesh)
                out.append(_fftn(np.broadcast_to(np.asarray(val, dtype=float), shape), n))
            return np.array(out)

        return hat
    arr = np.asarray(f, dtype=float)
    if arr.shape != (grid.time.steps + 1,) + shape:
        raise KernelError("source array must have shape (M+1, *space)")
    fh = _fftn(arr, n)
    times = grid.time.times

    def hat(s):
        s = np.atleast_1d(s)
        k = np.clip(np.searchsorted(times, s, side="right") - 1, 0, len(times) - 2)
        lam = (s - times[k]) / grid.time.dt
        lam = lam.reshape((-1,) + (1,) * n)
        return (1 - lam) * fh[k] + lam * fh[k + 1]

    return hat


def duhamel_solution(
    sched: DiffusionSchedule,
    f,
    grid: SpaceTimeGrid,
    rtol: float = 1e-6,
    max_panels: int = 512,
) -> BackwardSolution:
    """``w_t = int_t^T P_{t,s} f_s ds`` at every grid time, computed mode by mode.

    Substituting ``s = t + (T - t) u^2`` clusters nodes near ``s = t`` where
    high modes decay fastest; Gauss-Legendre panels in ``u`` are doubled
    until the relative change drops below ``rtol``.
    """
    n = grid.space.n
    if sched.n != n:
        raise KernelError("schedule and grid dimensions differ")
    T = grid.T
    L = grid.space.L
    xi = grid.space.wavenumbers()
    phi = _CumulativeA(sched, T)
    hat = _source_hat(f, grid)
    # the widest kernel, t = 0 to T, bounds all the others
    widest = KernelAccumulator(phi(np.array(T)) - phi(np.array(0.0)), 0.0, T)
    if tail_mass(widest, L / 2) > MASS_TOLERANCE:
        raise KernelError("kernel too wide for the period")
    gx, gw = np.polynomial.legendre.leggauss(8)
    times = grid.time.times
    out = np.zeros((len(times),) + grid.space.shape)
    panels_used = []
    for k, t in enumerate(times[:-1]):
        span = T - t
        if span <= 0:
            continue
        prev = None
        panels = 4
        while True:
            edges = np.linspace(0.0, 1.0, panels + 1)
            u = ((edges[:-1, None] + edges[1:, None]) / 2 + (edges[1:, None] - edges[:-1, None]) / 2 * gx).ravel()
            wu = (np.diff(edges)[:, None] / 2 * gw).ravel()
            s = t + span * u**2
            ws = wu * 2 * span * u
            A = phi(s) - phi(np.array(t))
            m = multiplier(A, xi, n)
            val = np.tensordot(ws, m * hat(s), axes=1)
            if prev is not None:
                scale = max(np.max(np.abs(val)), 1e-300)
                if np.max(np.abs(val - prev)) <= rtol * scale or panels >= max_panels:
                    break
            prev = val
            panels *= 2
        panels_used.append(panels)
        out[k] = _ifftn(val, n)
    return BackwardSolution(grid, out, {"method": "duhamel", "max_panels": max(panels_used, default=0)})


def pde_residual(sol: BackwardSolution, sched: DiffusionSchedule, f) -> np.ndarray:
    """Pointwise residual of ``d_t w + tr(a D^2 w) + f`` by centred differences (interior times)."""
    grid = sol.grid
    n = grid.space.n
    times = grid.time.times
    dt = grid.time.dt
    w = sol.w
    dtw = (w[2:] - w[:-2]) / (2 * dt)
    h = grid.space.dx
    res = dtw.copy()
    for i, t in enumerate(times[1:-1]):
        a = sched.matrix(t)
        wk = w[i + 1]
        if n == 1:
            res[i] += a[0, 0] * diff2_periodic(wk, h, 2)
        else:
            res[i] += a[0, 0] * diff2_periodic(wk, h, 2, -2) + a[1, 1] * diff2_periodic(wk, h, 2, -1)
            res[i] += 2 * a[0, 1] * diff2_periodic(diff2_periodic(wk, h, 1, -2), h, 1, -1)
        if callable(f):
            mesh = grid.space.mesh()
            res[i] += f(t, *mesh) if n == 2 else f(t, mesh)
        else:
            res[i] += f[i + 1]
    return res
