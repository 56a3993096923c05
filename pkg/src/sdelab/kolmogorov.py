"""Backward parabolic solver ``d_t w + a d2 w + b d w + c w + f = 0``, ``w_T = 0``.

Crank-Nicolson in time, centred second-order differences in space, periodic
boundary.  Coefficient arrays may carry leading batch axes (one per path or
continuation); every batch member is solved in the same sweep.

Layout: for ``n = 1`` all fields have shape ``(..., M + 1, N)``.  For
``n = 2``, ``a`` has shape ``(..., M + 1, 3, N, N)`` holding ``(a11, a12, a22)``
and ``b`` has shape ``(..., M + 1, 2, N, N)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .grids import BackwardSolution, SpaceTimeGrid, diff2_periodic, diff_periodic
from .lp_analysis import besov_sup_norm, build_cutoffs, decompose, holder_norm_dyadic

__all__ = [
    "SolverError",
    "CoefficientSlice",
    "BackwardSolution",
    "solve_cyclic",
    "solve_backward",
    "integral_residual",
    "schauder_diagnostic",
    "interpolation_diagnostic",
]


class SolverError(RuntimeError):
    pass


def sample_field(value, grid: SpaceTimeGrid) -> np.ndarray:
    """Sample a callable ``(t, x)`` / ``(t, x, y)`` or a constant on the grid."""
    shape = (grid.time.steps + 1,) + grid.space.shape
    if callable(value):
        t = grid.time.times.reshape((-1,) + (1,) * grid.space.n)
        mesh = grid.space.mesh()
        out = value(t, *mesh) if grid.space.n == 2 else value(t, mesh[None, :])
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()
    return np.full(shape, float(value))


@dataclass
class CoefficientSlice:
    grid: SpaceTimeGrid
    a: np.ndarray
    b: np.ndarray | float = 0.0
    c: np.ndarray | float = 0.0
    f: np.ndarray | float = 0.0
    lam_min: float = 0.0
    lam_max: float = np.inf
    holder_constant: float | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("a", "b", "c", "f"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise SolverError(f"coefficient {name} has non-finite values")
            setattr(self, name, arr)
        lo, hi = self.ellipticity_range()
        if self.lam_min > 0 and lo < self.lam_min * (1 - 1e-12):
            raise SolverError(f"ellipticity violated: min eigenvalue {lo:.3g} < {self.lam_min}")
        if hi > self.lam_max * (1 + 1e-12):
            raise SolverError(f"ellipticity violated: max eigenvalue {hi:.3g} > {self.lam_max}")
        if lo <= 0:
            raise SolverError(f"diffusion is not positive: min eigenvalue {lo:.3g}")

    @classmethod
    def from_functions(cls, grid: SpaceTimeGrid, a, b=0.0, c=0.0, f=0.0, **kw) -> "CoefficientSlice":
        if grid.space.n == 1:
            return cls(grid, sample_field(a, grid), sample_field(b, grid), sample_field(c, grid), sample_field(f, grid), **kw)
        a_parts = [sample_field(v, grid) for v in a]
        b_parts = [sample_field(v, grid) for v in (b if isinstance(b, (tuple, list)) else (b, b))]
        return cls(
            grid,
            np.stack(a_parts, axis=-3),
            np.stack(b_parts, axis=-3),
            sample_field(c, grid),
            sample_field(f, grid),
            **kw,
        )

    @property
    def n(self) -> int:
        return self.grid.space.n

    def ellipticity_range(self) -> tuple[float, float]:
        a = self.a
        if self.n == 1:
            return float(a.min()), float(a.max())
        a11, a12, a22 = a[..., 0, :, :], a[..., 1, :, :], a[..., 2, :, :]
        mid = (a11 + a22) / 2
        rad = np.sqrt(((a11 - a22) / 2) ** 2 + a12**2)
        return float((mid - rad).min()), float((mid + rad).max())

    def peclet(self) -> float:
        """max |b| dx / (2 a); centred advection is oscillation-free below 1."""
        h = self.grid.space.dx
        if self.n == 1:
            return float(np.max(np.abs(self.b) * h / (2 * self.a)))
        p1 = np.abs(self.b[..., 0, :, :]) * h / (2 * self.a[..., 0, :, :])
        p2 = np.abs(self.b[..., 1, :, :]) * h / (2 * self.a[..., 2, :, :])
        return float(max(p1.max(), p2.max()))

    def scaled(self, factor: float) -> "CoefficientSlice":
        """Same operator, source multiplied by ``factor``."""
        return CoefficientSlice(self.grid, self.a, self.b, self.c, self.f * factor, self.lam_min, self.lam_max, self.holder_constant)


def _thomas(lo, di, up, rhs):
    """Tridiagonal solve along axis 0; ``rhs`` may have one extra trailing axis."""
    n = di.shape[0]
    cp = np.empty_like(di)
    dp = np.empty_like(rhs)
    extra = rhs.ndim > di.ndim
    e = (lambda v: v[..., None]) if extra else (lambda v: v)
    m = di[0]
    cp[0] = up[0] / m
    dp[0] = rhs[0] / e(m)
    for i in range(1, n):
        m = di[i] - lo[i] * cp[i - 1]
        cp[i] = up[i] / m
        dp[i] = (rhs[i] - e(lo[i]) * dp[i - 1]) / e(m)
    x = np.empty_like(rhs)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - e(cp[i]) * x[i + 1]
    return x


def solve_cyclic(lo, di, up, rhs) -> np.ndarray:
    """Solve the periodic tridiagonal system along the last axis.

    Row ``i`` reads ``lo_i x_{i-1} + di_i x_i + up_i x_{i+1} = rhs_i`` with
    indices taken modulo ``N``.  Leading axes are independent systems.
    """
    lo, di, up, rhs = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lo, di, up, rhs)))
    # sweeping along a leading axis keeps each row contiguous
    lo, di, up, rhs = (np.ascontiguousarray(np.moveaxis(v, -1, 0)) for v in (lo, di, up, rhs))
    alpha = up[-1]
    beta = lo[0]
    gamma = -di[0]
    bb = di.copy()
    bb[0] = di[0] - gamma
    bb[-1] = di[-1] - alpha * beta / gamma
    u = np.zeros_like(rhs)
    u[0] = gamma
    u[-1] = alpha
    both = _thomas(lo, bb, up, np.stack([rhs, u], axis=-1))
    x, z = both[..., 0], both[..., 1]
    fact = (x[0] + beta * x[-1] / gamma) / (1 + z[0] + beta * z[-1] / gamma)
    return np.moveaxis(x - fact * z, 0, -1)


def _bands(a, b, c, h):
    lo = a / h**2 - b / (2 * h)
    di = -2 * a / h**2 + c
    up = a / h**2 + b / (2 * h)
    return lo, di, up


def apply_operator(w, a, b, c, h, n: int = 1) -> np.ndarray:
    """``a d2 w + b d w + c w`` with the solver's own stencils."""
    if n == 1:
        return a * diff2_periodic(w, h, 2) + b * diff2_periodic(w, h, 1) + c * w
    a11, a12, a22 = a[..., 0, :, :], a[..., 1, :, :], a[..., 2, :, :]
    b1, b2 = b[..., 0, :, :], b[..., 1, :, :]
    d1 = diff2_periodic(w, h, 1, -2)
    out = a11 * diff2_periodic(w, h, 2, -2) + a22 * diff2_periodic(w, h, 2, -1)
    out += 2 * a12 * diff2_periodic(d1, h, 1, -1)
    out += b1 * d1 + b2 * diff2_periodic(w, h, 1, -1) + c * w
    return out


def _take(arr, k, n_space, comp=False):
    """Time slice ``k`` of a field ``(..., M+1, [comp,] *space)`` (time axis located from the right)."""
    axis = arr.ndim - n_space - (1 if comp else 0) - 1
    if axis < 0:
        return arr
    return np.take(arr, k, axis=axis)


def _check_finite(w, k, t):
    if not np.all(np.isfinite(w)):
        bad = np.argwhere(~np.isfinite(w))[0]
        raise SolverError(f"non-finite values at time index {k} (t={t:.6g}), first entry {tuple(int(i) for i in bad)}")


def solve_backward(sl: CoefficientSlice, rannacher: int = 0, warn_peclet: bool = True) -> BackwardSolution:
    """March from ``T`` down to ``0``.

    ``rannacher`` > 0 replaces the first that many steps by two implicit Euler
    half-steps each, damping a non-smooth source near ``T``.
    """
    grid = sl.grid
    n = sl.n
    M = grid.time.steps
    dt = grid.time.dt
    h = grid.space.dx
    times = grid.time.times
    pe = sl.peclet()
    if warn_peclet and pe >= 1:
        warnings.warn(f"advection dominated: Peclet number {pe:.3g} >= 1", RuntimeWarning, stacklevel=2)
    comp = n == 2
    batch = np.broadcast_shapes(
        sl.a.shape[: sl.a.ndim - n - 1 - comp],
        sl.b.shape[: max(sl.b.ndim - n - 1 - comp, 0)] if sl.b.ndim > n + comp else (),
        sl.c.shape[: max(sl.c.ndim - n - 1, 0)] if sl.c.ndim > n else (),
        sl.f.shape[: max(sl.f.ndim - n - 1, 0)] if sl.f.ndim > n else (),
    )
    shape = batch + grid.space.shape
    out = np.zeros(batch + (M + 1,) + grid.space.shape)
    t_axis = len(batch)
    coef = lambda arr, k, cp=False: _take(arr, k, n, cp) if arr.ndim else arr
    step = _step_1d if n == 1 else _step_2d
    w = np.zeros(shape)
    for k in range(M - 1, -1, -1):
        nsub = 2 if (M - 1 - k) < rannacher else 1
        for sub in range(nsub):
            if nsub == 1:
                w = step(w, coef, sl, k, k + 1, dt, h, 0.5)
            else:
                # implicit Euler half-steps with coefficients at the target time
                w = step(w, coef, sl, k, k + 1, dt / 2, h, 1.0, frac=(sub, nsub))
        _check_finite(w, k, times[k])
        np.moveaxis(out, t_axis, 0)[k] = w
    return BackwardSolution(grid, out, {"method": "crank-nicolson", "peclet": pe, "rannacher": rannacher})


def _lerp(arr_new, arr_old, s):
    return arr_new if s == 0 else (1 - s) * arr_new + s * arr_old


def _step_1d(w, coef, sl, k_new, k_old, dt, h, theta, frac=None):
    a0, b0, c0, f0 = coef(sl.a, k_old), coef(sl.b, k_old), coef(sl.c, k_old), coef(sl.f, k_old)
    a1, b1, c1, f1 = coef(sl.a, k_new), coef(sl.b, k_new), coef(sl.c, k_new), coef(sl.f, k_new)
    if frac is not None:
        # half-step s in {0, 1}; sub 0 lands at the midpoint
        sub, nsub = frac
        s_new = 1 - (sub + 1) / nsub
        a1, b1, c1, f1 = (_lerp(x1, x0, s_new) for x1, x0 in zip((a1, b1, c1, f1), (a0, b0, c0, f0)))
    rhs = w + dt * (1 - theta) * (apply_operator(w, a0, b0, c0, h) + f0) + dt * theta * f1
    lo, di, up = _bands(a1, b1, c1, h)
    return solve_cyclic(-dt * theta * lo, 1 - dt * theta * di, -dt * theta * up, rhs)


def _step_2d(w, coef, sl, k_new, k_old, dt, h, theta, frac=None):
    a0, b0 = coef(sl.a, k_old, True), coef(sl.b, k_old, True)
    a1, b1 = coef(sl.a, k_new, True), coef(sl.b, k_new, True)
    c0, c1 = coef(sl.c, k_old), coef(sl.c, k_new)
    f0, f1 = coef(sl.f, k_old), coef(sl.f, k_new)
    if a0.ndim < 3:
        a0, a1 = np.broadcast_to(a0[..., None, None], a0.shape + w.shape[-2:]), np.broadcast_to(a1[..., None, None], a1.shape + w.shape[-2:])
    if np.ndim(b0) < 3:
        b0 = b1 = np.zeros((2,) + w.shape[-2:]) + b0
    h2 = lambda arr, ax, o: diff2_periodic(arr, h, o, ax)

    def axis_op(arr, a, b, c, ai, bi, ax):
        return a[..., ai, :, :] * h2(arr, ax, 2) + b[..., bi, :, :] * h2(arr, ax, 1) + 0.5 * c * arr

    def mixed_op(arr, a):
        return 2 * a[..., 1, :, :] * h2(h2(arr, -2, 1), -1, 1)

    # Craig-Sneyd splitting: the mixed term is explicit but corrected once
    y0 = w + dt * (apply_operator(w, a0, b0, c0, h, n=2) + (1 - theta) * f0 + theta * f1)
    old = [axis_op(w, a0, b0, c0, 0, 0, -2), axis_op(w, a0, b0, c0, 2, 1, -1)]

    def implicit_sweeps(y):
        for (ax, ai, bi), o in zip(((-2, 0, 0), (-1, 2, 1)), old):
            rhs = y - dt * theta * o
            lo, di, up = _bands(a1[..., ai, :, :], b1[..., bi, :, :], 0.5 * np.asarray(c1), h)
            lo, di, up = (np.broadcast_to(v, rhs.shape) for v in (lo, di, up))
            if ax == -2:
                sw = lambda v: np.swapaxes(v, -1, -2)
                y = sw(solve_cyclic(sw(-dt * theta * lo), sw(1 - dt * theta * di), sw(-dt * theta * up), sw(rhs)))
            else:
                y = solve_cyclic(-dt * theta * lo, 1 - dt * theta * di, -dt * theta * up, rhs)
        return y

    y = implicit_sweeps(y0)
    y0 = y0 + 0.5 * dt * (mixed_op(y, a1) - mixed_op(w, a0))
    return implicit_sweeps(y0)


def integral_residual(sol: BackwardSolution, sl: CoefficientSlice) -> float:
    """sup |w_t - int_t^T (L w + f) ds| with trapezoid sums and the solver stencils."""
    n = sl.n
    h = sl.grid.space.dx
    dt = sl.grid.time.dt
    M = sl.grid.time.steps
    t_axis = sol.time_axis
    comp = n == 2
    vals = []
    for k in range(M + 1):
        wk = sol.slice(k)
        ak = _take(sl.a, k, n, comp) if sl.a.ndim else sl.a
        bk = _take(sl.b, k, n, comp) if sl.b.ndim else sl.b
        ck = _take(sl.c, k, n) if sl.c.ndim else sl.c
        fk = _take(sl.f, k, n) if sl.f.ndim else sl.f
        if comp and np.ndim(bk) < 3:
            bk = np.zeros((2,) + wk.shape[-2:]) + bk
        vals.append(apply_operator(wk, ak, bk, ck, h, n) + fk)
    g = np.stack(np.broadcast_arrays(*vals), axis=t_axis)
    g = np.moveaxis(g, t_axis, 0)
    # integral from t_k to T by trapezoid
    tail = np.zeros_like(g)
    for k in range(M - 1, -1, -1):
        tail[k] = tail[k + 1] + 0.5 * dt * (g[k] + g[k + 1])
    w = np.moveaxis(sol.w, t_axis, 0)
    return float(np.max(np.abs(w - tail)))


def _spatial_norms(field_tx: np.ndarray, cut, s: float) -> float:
    dec = decompose(field_tx, cut)
    return float(np.max(besov_sup_norm(dec, s)))


def schauder_diagnostic(sol: BackwardSolution, f, alpha: float) -> dict:
    """(||d_t w||_alpha + ||w||_{2+alpha} + ||w||_0 / T) / ||f||_alpha with dyadic norms.

    Norms are spatial, taken as a supremum over the time grid.  Requires
    ``n = 1`` and an LP-compatible grid (``N`` a power of two, ``L >= 4 pi``).
    """
    grid = sol.grid
    if grid.space.n != 1:
        raise SolverError("diagnostics are one-dimensional")
    cut = build_cutoffs(grid.space.N, grid.space.L)
    f = np.broadcast_to(np.asarray(f, dtype=float), sol.w.shape)
    f_norm = float(np.max(holder_norm_dyadic(decompose(f, cut), alpha)))
    if f_norm == 0:
        raise SolverError("source is identically zero")
    dt_norm = float(np.max(holder_norm_dyadic(decompose(sol.dt(), cut), alpha)))
    w_norm = _spatial_norms(sol.w, cut, 2 + alpha)
    sup = float(np.max(np.abs(sol.w))) / grid.T
    total = dt_norm + w_norm + sup
    return {
        "alpha": alpha,
        "dt_norm": dt_norm,
        "w_2alpha_norm": w_norm,
        "sup_over_T": sup,
        "f_norm": f_norm,
        "ratio": total / f_norm,
    }


def _gamma_norm(arr: np.ndarray, gamma: float, cut, h: float) -> np.ndarray:
    """C^gamma norm per row: dyadic for non-integer gamma, derivative sums for integers."""
    if abs(gamma - round(gamma)) < 1e-12:
        out = np.max(np.abs(arr), axis=-1)
        d = arr
        for _ in range(int(round(gamma))):
            d = diff_periodic(d, h, 1)
            out = out + np.max(np.abs(d), axis=-1)
        return out
    return besov_sup_norm(decompose(arr, cut), gamma)


def interpolation_diagnostic(sol: BackwardSolution, g0: float, g1: float, g2: float) -> dict:
    """Compare the time-Hoelder modulus of ``w`` in ``C^g1`` with the interpolation bound.

    ``theta = (g2 - g1) / (g2 - g0)``; the report's ``ratio`` is
    ``sup ||w_t1 - w_t2||_g1 / |t1 - t2|^theta`` over
    ``||d_t w||_g0^theta * ||w||_g2^(1 - theta)``.
    """
    if not (0 <= g0 < g1 < g2):
        raise SolverError("need 0 <= g0 < g1 < g2")
    if abs(g1 - round(g1)) < 1e-12:
        raise SolverError("g1 must be non-integer")
    grid = sol.grid
    if grid.space.n != 1 or sol.w.ndim != 2:
        raise SolverError("interpolation diagnostic expects a single one-dimensional solution")
    theta = (g2 - g1) / (g2 - g0)
    cut = build_cutoffs(grid.space.N, grid.space.L)
    h = grid.space.dx
    w = sol.w
    M = grid.time.steps
    lhs = 0.0
    lag = 1
    while lag <= M:
        diff = w[lag:] - w[:-lag]
        nrm = _gamma_norm(diff, g1, cut, h)
        lhs = max(lhs, float(np.max(nrm)) / (lag * grid.time.dt) ** theta)
        lag *= 2
    dt_norm = float(np.max(_gamma_norm(sol.dt(), g0, cut, h)))
    w_norm = float(np.max(_gamma_norm(w, g2, cut, h)))
    rhs = dt_norm**theta * w_norm ** (1 - theta)
    return {"theta": theta, "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else np.inf}
