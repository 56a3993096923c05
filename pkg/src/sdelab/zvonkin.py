"""Zvonkin transformation: phi_t = id + u_t, its inverse, the transformed SDE and experiments.

Everything is one-dimensional in space.  ``u`` and ``v`` live on a periodic
space-time lattice and are read back by periodic cubic splines in ``x`` and
linear interpolation in ``t`` (``v``: left-point in ``t``).  Points outside
``[0, L)`` are wrapped, so ``phi_t(x + L) = phi_t(x) + L``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.interpolate import CubicSpline

from .bspde import CoefficientModel, _bump_weights
from .grids import BackwardSolution, SpaceTimeGrid, diff_periodic
from .kolmogorov import CoefficientSlice, solve_backward
from .paths import BrownianEnsemble, TimeGrid, sample_ensemble

GRADIENT_BOUND = 0.5


class FrameError(ValueError):
    pass


class HorizonError(RuntimeError):
    pass


class _PeriodicCubic:
    """Periodic cubic splines of ``values`` with shape ``(B, S, N)`` (batch, slices, space)."""

    def __init__(self, values: np.ndarray, L: float):
        values = np.asarray(values, dtype=float)
        B, S, N = values.shape
        self.L = L
        self.N = N
        self.h = L / N
        x = self.h * np.arange(N + 1)
        ext = np.concatenate([values, values[..., :1]], axis=-1)
        sp = CubicSpline(x, np.moveaxis(ext, -1, 0), bc_type="periodic", axis=0)
        self.c = sp.c  # (4, N, B, S)
        self.B = B

    def __call__(self, k, x, deriv: int = 0):
        """Evaluate slice ``k`` (int or array broadcasting with ``x``) at points ``x``.

        Batch member ``i`` is used for ``x[i]`` when there is more than one.
        """
        x = np.asarray(x, dtype=float)
        xm = np.mod(x, self.L)
        idx = np.minimum((xm // self.h).astype(int), self.N - 1)
        s = xm - idx * self.h
        if self.B == 1:
            bi = 0
        else:
            if x.shape[:1] != (self.B,):
                raise FrameError(f"expected {self.B} points along the first axis, got shape {x.shape}")
            bi = np.arange(self.B).reshape((-1,) + (1,) * (x.ndim - 1))
        c0, c1, c2, c3 = (self.c[i][idx, bi, k] for i in range(4))
        if deriv == 0:
            return ((c0 * s + c1) * s + c2) * s + c3
        if deriv == 1:
            return (3 * c0 * s + 2 * c1) * s + c2
        if deriv == 2:
            return 6 * c0 * s + 2 * c1
        raise ValueError("deriv must be 0, 1 or 2")


def _batched(arr: np.ndarray, slices: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != slices:
        raise FrameError(f"field must have shape ([paths,] {slices}, N); got {arr.shape}")
    return arr


@dataclass
class ZvonkinFrame:
    grid: SpaceTimeGrid
    u: np.ndarray  # (B, M+1, N)
    v: np.ndarray  # (B, M, N), zeros when deterministic
    g_star: float
    grad_range: tuple[float, float]
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        L = self.grid.space.L
        h = self.grid.space.dx
        self._u = _PeriodicCubic(self.u, L)
        self._du = _PeriodicCubic(diff_periodic(self.u, h, 1), L)
        self._d2u = _PeriodicCubic(diff_periodic(self.u, h, 2), L)
        self._v = _PeriodicCubic(self.v, L)
        self._dv = _PeriodicCubic(diff_periodic(self.v, h, 1), L)
        self.deterministic = not np.any(self.v)

    @property
    def T(self) -> float:
        return self.grid.T

    def _locate(self, t: float):
        dt = self.grid.time.dt
        M = self.grid.time.steps
        if t < -1e-12 or t > self.T * (1 + 1e-12):
            raise FrameError(f"time {t} outside the frame horizon [0, {self.T}]")
        k = min(int(math.floor(t / dt + 1e-9)), M - 1)
        lam = min(max(t / dt - k, 0.0), 1.0)
        return k, lam

    def _lin(self, spl, t, x):
        k, lam = self._locate(t)
        out = spl(k, x)
        if lam > 1e-12:
            out = (1 - lam) * out + lam * spl(k + 1, x)
        return out

    def u_at(self, t, x):
        return self._lin(self._u, t, x)

    def du_at(self, t, x):
        return self._lin(self._du, t, x)

    def d2u_at(self, t, x):
        return self._lin(self._d2u, t, x)

    def v_at(self, t, x):
        return self._v(self._locate(t)[0], x)

    def dv_at(self, t, x):
        return self._dv(self._locate(t)[0], x)

    def phi(self, t, x):
        return np.asarray(x, dtype=float) + self.u_at(t, x)

    def grad_phi(self, t, x):
        return 1.0 + self.du_at(t, x)

    def local_c2(self, k: int) -> np.ndarray:
        """``||u_t||_{C^2} + ||v_t||_{C^2}`` per batch member at lattice time ``k``."""
        h = self.grid.space.dx
        u = self.u[:, k]
        out = np.max(np.abs(u), -1) + np.max(np.abs(diff_periodic(u, h, 1)), -1) + np.max(np.abs(diff_periodic(u, h, 2)), -1)
        if k < self.v.shape[1]:
            v = self.v[:, k]
            out = out + np.max(np.abs(v), -1) + np.max(np.abs(diff_periodic(v, h, 1)), -1) + np.max(np.abs(diff_periodic(v, h, 2)), -1)
        return out

    def sandwich_check(self, probes: int = 64, slices: int = 9) -> dict:
        """Bi-Lipschitz bounds of phi on all pairs of ``probes`` points spanning two periods."""
        L = self.grid.space.L
        M = self.grid.time.steps
        x = np.linspace(-L, L, probes, endpoint=False) + 0.5 * L / probes
        i, j = np.triu_indices(probes, 1)
        lo, hi = np.inf, 0.0
        for k in np.unique(np.linspace(0, M, slices).astype(int)):
            for b in range(self.u.shape[0]):
                spl = self._u
                px = x + (spl(k, x) if spl.B == 1 else spl(k, np.full((spl.B, probes), x))[b])
                ratio = np.abs(px[i] - px[j]) / np.abs(x[i] - x[j])
                lo, hi = min(lo, float(ratio.min())), max(hi, float(ratio.max()))
        return {"min_ratio": lo, "max_ratio": hi, "pairs": int(len(i)), "ok": bool(lo >= 0.5 and hi <= 1.5)}


def build_phi(u, grid: SpaceTimeGrid, v=None, bound: float = GRADIENT_BOUND) -> ZvonkinFrame:
    """Frame for ``phi_t = x + u_t``; fails unless ``sup |du| <= bound``."""
    if grid.space.n != 1:
        raise FrameError("the Zvonkin frame is one-dimensional")
    M = grid.time.steps
    u = _batched(u, M + 1)
    v = np.zeros((u.shape[0], M, grid.space.N)) if v is None else _batched(v, M)
    if v.shape[0] != u.shape[0] or v.shape[-1] != u.shape[-1]:
        raise FrameError("u and v are on incompatible grids")
    du = diff_periodic(u, grid.space.dx, 1)
    g_star = float(np.max(np.abs(du)))
    if not g_star <= bound:
        raise FrameError(f"gradient bound violated: sup|du| = {g_star:.4g} > {bound}")
    return ZvonkinFrame(grid, u, v, g_star, (float(1 + du.min()), float(1 + du.max())))


def frame_from_solution(sol: BackwardSolution, **kw) -> ZvonkinFrame:
    return build_phi(sol.w, sol.grid, **kw)


def frame_from_pair(pair, **kw) -> ZvonkinFrame:
    return build_phi(pair.u, pair.grid, pair.v, **kw)


def invert_phi(frame: ZvonkinFrame, t: float, y, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Solve ``y = x + u_t(x)`` by the fixed point ``x <- y - u_t(x)``."""
    y = np.asarray(y, dtype=float)
    x = y.copy()
    for _ in range(max_iter):
        nxt = y - frame.u_at(t, x)
        if np.max(np.abs(nxt - x), initial=0.0) < tol:
            return nxt
        x = nxt
    raise FrameError("inverse of phi did not converge; the frame is corrupt")


def _kolmogorov_gradient(model: CoefficientModel, T: float, N: int, L: float, steps: int, inc=None):
    grid = SpaceTimeGrid.make(N, steps, T, L)
    if inc is None:
        inc = np.zeros((steps, 1))
    flds = model.fields(inc, grid)
    a = np.broadcast_to(flds["a"], (steps + 1, N)) if np.ndim(flds["a"]) < 2 else flds["a"]
    sol = solve_backward(CoefficientSlice(grid, a, flds["b"], flds["c"], flds["f"]), warn_peclet=False)
    return sol, float(np.max(np.abs(sol.dx())))


@dataclass
class HorizonReport:
    T: float
    g_star: float
    history: list
    solution: BackwardSolution | None = None


def choose_horizon(
    model: CoefficientModel,
    N: int = 128,
    L: float = 2 * np.pi,
    T_max: float = 1.0,
    steps_per_unit: int = 64,
    margin: float = 0.1,
    dt_min: float = 1 / 256,
    probe_paths: int = 16,
    seed: int = 0,
    iterations: int = 6,
) -> HorizonReport:
    """Largest ``T <= T_max`` (to bisection accuracy) with ``sup ||du_t|| <= (1 - margin)/2``.

    For random models the bound is checked on pathwise solutions ``w`` of
    ``probe_paths`` sampled paths, which dominate ``u = E^t w``.
    """
    target = (1 - margin) * GRADIENT_BOUND
    history = []

    def measure(T):
        steps = max(8, int(math.ceil(T * steps_per_unit)))
        inc = None
        if model.random:
            inc = sample_ensemble(seed, probe_paths, TimeGrid(T, steps)).increments
        sol, g = _kolmogorov_gradient(model, T, N, L, steps, inc)
        history.append({"T": T, "g_star": g})
        return sol, g

    sol, g = measure(T_max)
    if g <= target:
        return HorizonReport(T_max, g, history, sol)
    hi = T_max
    T = T_max
    while g > target:
        hi = T
        T = T / 2
        if T < dt_min:
            raise HorizonError(f"no horizon >= {dt_min} meets the gradient bound; measured {history}")
        sol, g = measure(T)
    lo, best = T, (T, g, sol)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        s, gm = measure(mid)
        if gm <= target:
            lo, best = mid, (mid, gm, s)
        else:
            hi = mid
    return HorizonReport(best[0], best[1], history, best[2])


@dataclass
class TransformedCoefficients:
    """``b~_t(y) = (sigma dv) o phi^-1`` and ``s~_t(y) = (dphi sigma + v) o phi^-1``."""

    frame: ZvonkinFrame
    model: CoefficientModel

    def _sigma(self, t, x, ystate):
        tt = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.model.sigma(tt, x, ystate), dtype=float), np.shape(x))

    def drift(self, t, y, ystate=0.0, x=None):
        if self.frame.deterministic:
            return np.zeros(np.shape(y))
        x = invert_phi(self.frame, t, y) if x is None else x
        return self._sigma(t, x, ystate) * self.frame.dv_at(t, x)

    def diffusion(self, t, y, ystate=0.0, x=None):
        x = invert_phi(self.frame, t, y) if x is None else x
        out = self.frame.grad_phi(t, x) * self._sigma(t, x, ystate)
        if not self.frame.deterministic:
            out = out + self.frame.v_at(t, x)
        return out

    def lipschitz_report(self, half_box: float | None = None, probes: int = 65, slices: int = 5) -> dict:
        """Largest ``(|db~| + |ds~|) / (K_t |dy|)`` over neighbouring probe pairs in the box."""
        fr = self.frame
        L = fr.grid.space.L
        half_box = L if half_box is None else half_box
        M = fr.grid.time.steps
        B = fr.u.shape[0]
        y = np.linspace(-half_box, half_box, probes)
        worst = 0.0
        for k in np.unique(np.linspace(0, M - 1, slices).astype(int)):
            t = k * fr.grid.time.dt
            K = fr.local_c2(k)
            Y = np.broadcast_to(y, (B, probes)) if B > 1 else y
            ystate = 0.0
            bt = self.drift(t, Y, ystate)
            st = self.diffusion(t, Y, ystate)
            num = np.abs(np.diff(bt, axis=-1)) + np.abs(np.diff(st, axis=-1))
            den = np.diff(y)
            Kb = K[:, None] if B > 1 else K[0]
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(num > 0, num / (Kb * den), 0.0)
            worst = max(worst, float(np.max(r)))
        return {"max_ratio": worst, "half_box": half_box}


def transform_coefficients(frame: ZvonkinFrame, model: CoefficientModel, v=None) -> TransformedCoefficients:
    if v is not None:
        v = _batched(v, frame.grid.time.steps)
        if v.shape[-1] != frame.grid.space.N:
            raise FrameError("v and the frame use different space grids")
        frame = ZvonkinFrame(frame.grid, frame.u, v, frame.g_star, frame.grad_range, frame.info)
    return TransformedCoefficients(frame, model)


@dataclass(frozen=True)
class SdeRunConfig:
    dt: float
    horizon: float
    paths: int = 1000
    x0: float = 0.0
    box: float | None = None

    def __post_init__(self):
        if self.paths < 1:
            raise ValueError("need at least one path")
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        ratio = self.horizon / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("dt must divide the horizon")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)


def _y_states(model: CoefficientModel, ens: BrownianEnsemble) -> np.ndarray:
    if not model.random:
        return np.zeros((len(ens), ens.grid.steps + 1))
    return model.y_process(ens.increments, ens.grid)[..., 0]


def _check_ensemble(cfg: SdeRunConfig, ens: BrownianEnsemble):
    if ens.grid.steps != cfg.steps or abs(ens.grid.t_end - cfg.horizon) > 1e-12:
        raise ValueError("ensemble grid does not match the run config")


def euler_direct(model: CoefficientModel, cfg: SdeRunConfig, ens: BrownianEnsemble, drift: Callable | None = None) -> np.ndarray:
    """Euler-Maruyama for ``dX = b dt + sigma dW``; returns ``X`` of shape ``(P, steps+1)``."""
    _check_ensemble(cfg, ens)
    b = model.b if drift is None else drift
    dW = ens.increments[..., 0]
    ys = _y_states(model, ens)
    P, M = dW.shape
    X = np.empty((P, M + 1))
    X[:, 0] = cfg.x0
    dt = cfg.dt
    for k in range(M):
        t = k * dt
        x = X[:, k]
        bk = np.broadcast_to(np.asarray(b(t, x, ys[:, k]), dtype=float), x.shape)
        sk = np.broadcast_to(np.asarray(model.sigma(t, x, ys[:, k]), dtype=float), x.shape)
        X[:, k + 1] = x + bk * dt + sk * dW[:, k]
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("Euler path left the finite range")
    return X


@dataclass
class TransformedRun:
    X: np.ndarray
    Y: np.ndarray
    excluded: np.ndarray

    @property
    def excluded_fraction(self) -> float:
        return float(np.mean(self.excluded))


def euler_transformed(tc: TransformedCoefficients, cfg: SdeRunConfig, ens: BrownianEnsemble) -> TransformedRun:
    """Euler for ``Y = phi(X)`` and ``X_k = phi_{t_k}^{-1}(Y_k)``."""
    _check_ensemble(cfg, ens)
    frame = tc.frame
    if cfg.horizon > frame.T / 2 * (1 + 1e-12):
        raise HorizonError(f"horizon {cfg.horizon} exceeds half the frame horizon {frame.T}")
    dW = ens.increments[..., 0]
    ys = _y_states(tc.model, ens)
    P, M = dW.shape
    if frame.u.shape[0] not in (1, P):
        raise FrameError("frame batch does not match the path count")
    Y = np.empty((P, M + 1))
    X = np.empty((P, M + 1))
    X[:, 0] = cfg.x0
    Y[:, 0] = frame.phi(0.0, np.full(P, cfg.x0))
    dt = cfg.dt
    for k in range(M):
        t = k * dt
        x = X[:, k] if k == 0 else invert_phi(frame, t, Y[:, k])
        X[:, k] = x
        Y[:, k + 1] = Y[:, k] + tc.drift(t, Y[:, k], ys[:, k], x) * dt + tc.diffusion(t, Y[:, k], ys[:, k], x) * dW[:, k]
    X[:, M] = invert_phi(frame, M * dt, Y[:, M])
    box = np.inf if cfg.box is None else cfg.box / 2
    excluded = np.any(np.abs(Y) > box, axis=1)
    return TransformedRun(X, Y, excluded)


def conjugacy_error(X_direct: np.ndarray, run: TransformedRun) -> float:
    """``sup_t mean |X_direct - X_transformed|`` over paths kept inside the box."""
    keep = ~run.excluded
    if not np.any(keep):
        raise HorizonError("every path left the box")
    return float(np.max(np.mean(np.abs(X_direct[keep] - run.X[keep]), axis=0)))


# two-branch example: dX = min(sqrt|X - W|, 1) dt + dW


def _sqrt_drift(x, w):
    return np.minimum(np.sqrt(np.abs(x - w)), 1.0)


def nonuniqueness_demo(dt: float = 2**-10, deltas=(1e-6, 1e-5, 1e-4, 1e-3), paths: int = 100, seed: int = 0, horizon: float = 1.0) -> dict:
    """Both closed-form branches, and Euler started on and next to the zero branch."""
    if dt > 2**-8:
        raise ValueError("dt must be at most 2^-8")
    cfg = SdeRunConfig(dt, horizon, paths)
    ens = sample_ensemble(seed, paths, cfg.grid)
    W = ens.values()[..., 0]
    t = cfg.grid.times
    dW = ens.increments[..., 0]

    def residual(X):
        drift = _sqrt_drift(X[:, :-1], W[:, :-1]) * dt
        integral = np.concatenate([np.zeros((paths, 1)), np.cumsum(drift, axis=1)], axis=1)
        return float(np.max(np.abs(X - X[:, :1] - integral - W)))

    def euler(x0):
        X = np.empty_like(W)
        X[:, 0] = x0
        for k in range(cfg.steps):
            X[:, k + 1] = X[:, k] + _sqrt_drift(X[:, k], W[:, k]) * dt + dW[:, k]
        return X

    branch1 = W.copy()
    branch2 = t**2 / 4 + W
    zero = euler(0.0)
    out = {
        "dt": dt,
        "branch_zero_residual": residual(branch1),
        "branch_quadratic_residual": residual(branch2),
        "euler_zero_max": float(np.max(np.abs(zero[:, -1] - W[:, -1]))),
        "perturbed": [],
    }
    for d in deltas:
        for sgn in (1.0, -1.0):
            X = euler(sgn * d)
            gap = float(np.max(np.abs(X[:, -1] - (horizon**2 / 4 + W[:, -1]))))
            out["perturbed"].append({"delta": sgn * d, "terminal_gap": gap})
    return out


# mollified drift at arbitrary points


def mollified_drift(model: CoefficientModel, m: float, L: float, nodes: int = 48) -> Callable:
    """``(b * rho_m)(t, x, y)`` by Gauss-Legendre quadrature against the bump."""
    if 2.0 / m > L:
        raise ValueError(f"mollifier of width {2 / m:.3g} exceeds the period {L:.3g}")
    z, w = _bump_weights(nodes)
    shift = z / m

    def b(t, x, y):
        x = np.asarray(x, dtype=float)
        yy = np.asarray(y, dtype=float)[..., None] if np.ndim(y) else y
        vals = np.asarray(model.b(t, x[..., None] - shift, yy), dtype=float)
        return np.broadcast_to(vals, x.shape + (len(z),)) @ w

    return b


def ucp_cauchy_experiment(
    model: CoefficientModel,
    m_list=(4, 8, 16, 32),
    cfg: SdeRunConfig | None = None,
    seed: int = 0,
    L: float = 2 * np.pi,
    nodes: int = 48,
) -> dict:
    """``E sup_t |X^m - X^{2m}|`` on common noise, with standard errors."""
    cfg = cfg or SdeRunConfig(2**-10, 0.5, 500)
    ens = sample_ensemble(seed, cfg.paths, cfg.grid)
    levels = sorted(set(m_list) | {2 * m for m in m_list})
    paths = {m: euler_direct(model, cfg, ens, mollified_drift(model, m, L, nodes)) for m in levels}
    rows = []
    for m in m_list:
        d = np.max(np.abs(paths[m] - paths[2 * m]), axis=1)
        rows.append({"m": m, "distance": float(d.mean()), "stderr": float(d.std(ddof=1) / math.sqrt(len(d)))})
    violations = sum(
        1 for a, b in zip(rows, rows[1:]) if b["distance"] > a["distance"]
    )
    within_noise = all(
        b["distance"] - a["distance"] <= 3 * math.hypot(a["stderr"], b["stderr"])
        for a, b in zip(rows, rows[1:])
    )
    return {"rows": rows, "violations": violations, "violations_within_noise": within_noise, "seed": seed}


def seed_agreement(rep1: dict, rep2: dict, factor: float = 3.0) -> bool:
    return all(
        abs(a["distance"] - b["distance"]) <= factor * math.hypot(a["stderr"], b["stderr"])
        for a, b in zip(rep1["rows"], rep2["rows"])
    )


# Ito-Wentzell


@dataclass(frozen=True)
class ItoWentzellRecipe:
    """``phi_t(x) = phi_0(x) + int g_s(x) ds + int v_s(x) dW_s`` with polynomial coefficients.

    ``phi0`` holds polynomial coefficients (lowest degree first); ``g`` and
    ``v`` map a time to such coefficients.  ``X`` solves
    ``dX = beta(t, X) dt + gamma(t, X) dW``.
    """

    name: str
    phi0: tuple
    g: Callable[[float], np.ndarray]
    v: Callable[[float], np.ndarray]
    beta: Callable = lambda t, x: 0.0
    gamma: Callable = lambda t, x: 1.0
    x0: float = 0.0


def _coeffs(c, deg):
    out = np.zeros(deg + 1)
    c = np.asarray(c, dtype=float)
    out[: len(c)] = c
    return out


RECIPES: dict[str, ItoWentzellRecipe] = {
    "identity": ItoWentzellRecipe("identity", (0.0, 1.0), lambda t: np.zeros(1), lambda t: np.zeros(1)),
    "quadratic": ItoWentzellRecipe("quadratic", (0.0, 1.0), lambda t: np.array([0.0, 0.0, 1.0]), lambda t: np.zeros(1)),
    "cross": ItoWentzellRecipe("cross", (0.0, 1.0), lambda t: np.zeros(1), lambda t: np.array([0.0, 1.0])),
}


def _horner(C, x):
    """Evaluate per-path coefficient rows ``C`` (P, deg+1) at ``x`` (P,)."""
    out = np.zeros_like(x)
    for j in range(C.shape[-1] - 1, -1, -1):
        out = out * x + C[..., j]
    return out


def _deriv(C):
    if C.shape[-1] == 1:
        return np.zeros_like(C)
    return C[..., 1:] * np.arange(1, C.shape[-1])


def ito_wentzell_check(
    recipe: ItoWentzellRecipe,
    dt: float = 2**-12,
    paths: int = 1000,
    seed: int = 0,
    horizon: float = 1.0,
    drop_cross: bool = False,
) -> dict:
    """Mean over paths of ``sup_k |phi_{t_k}(X_k) - phi_0(X_0) - sum of the five terms|``."""
    try:
        g0 = np.asarray(recipe.g(0.0), dtype=float)
        v0 = np.asarray(recipe.v(0.0), dtype=float)
    except Exception as exc:
        raise ValueError(f"malformed recipe {recipe.name!r}: {exc}") from exc
    if g0.ndim != 1 or v0.ndim != 1:
        raise ValueError(f"malformed recipe {recipe.name!r}: coefficients must be 1-d")
    deg = max(len(recipe.phi0), len(g0), len(v0)) - 1
    cfg = SdeRunConfig(dt, horizon, paths)
    ens = sample_ensemble(seed, paths, cfg.grid)
    dW = ens.increments[..., 0]
    M = cfg.steps
    C = np.tile(_coeffs(recipe.phi0, deg), (paths, 1))
    X = np.full(paths, recipe.x0, dtype=float)
    start = _horner(C, X)
    total = np.zeros(paths)
    worst = np.zeros(paths)
    for k in range(M):
        t = k * dt
        g = _coeffs(recipe.g(t), deg)
        v = _coeffs(recipe.v(t), deg)
        beta = np.broadcast_to(np.asarray(recipe.beta(t, X), dtype=float), X.shape)
        gamma = np.broadcast_to(np.asarray(recipe.gamma(t, X), dtype=float), X.shape)
        dX = beta * dt + gamma * dW[:, k]
        dphi = _deriv(C)
        terms = (
            npoly.polyval(X, g) * dt
            + npoly.polyval(X, v) * dW[:, k]
            + _horner(dphi, X) * dX
            + 0.5 * _horner(_deriv(dphi), X) * gamma**2 * dt
        )
        if not drop_cross:
            terms = terms + npoly.polyval(X, npoly.polyder(v) if len(v) > 1 else [0.0]) * gamma * dt
        total += terms
        C = C + g * dt + v[None, :] * dW[:, k : k + 1]
        X = X + dX
        worst = np.maximum(worst, np.abs(_horner(C, X) - start - total))
    return {
        "recipe": recipe.name,
        "dt": dt,
        "mean_sup_residual": float(worst.mean()),
        "stderr": float(worst.std(ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0,
        "drop_cross": drop_cross,
    }
