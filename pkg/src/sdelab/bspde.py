"""The backward stochastic Kolmogorov pair (u, v) by nested simulation.

For a coefficient model driven by ``y_t = int_0^t h dW`` the pathwise
solution ``w`` is computed for every continuation of the outer path, and

* ``u_{t_k} = E^{t_k} w_{t_k}``,
* ``v_{t_k} = E^{t_k} w^k_{t_k}`` where ``w^k = dw / d(Delta W_k)`` solves
  the same scheme with source
  ``g^k = (D_k a) d2 w + (D_k b) d w + (D_k c) w + D_k f``.

Everything is discrete-exact: ``D_k`` of a coefficient at time ``t_r`` is
``d_y coef(t_r, x, y_r) * h(t_k) * 1{k < r}``, and ``w^k`` solves the
differentiated Crank-Nicolson system, so it is the derivative of the discrete
``w`` rather than an approximation of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .grids import SpaceTimeGrid, diff2_periodic
from .kolmogorov import CoefficientSlice, SolverError, apply_operator, solve_backward
from .lp_analysis import besov_sup_norm, build_cutoffs, decompose
from .malliavin import ConditionalConfig
from .parallel import pmap, tree_sum
from .paths import COMMON_INNER_STREAM, INNER_STREAM, BrownianEnsemble, TimeGrid, make_rng

Field = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class ModelError(ValueError):
    pass


def _zero(t, x, y):
    return 0.0


def _one(t, x, y):
    return 1.0


@dataclass(frozen=True)
class CoefficientModel:
    """Random coefficients ``coef_t(x) = coef(t, x, y_t)`` with ``y_t = int_0^t h dW``.

    All fields take ``(t, x, y)`` with ``t`` of shape ``(M+1, 1)``, ``x`` of
    shape ``(N,)`` and ``y`` of shape ``(..., M+1, 1)`` and must broadcast.
    ``f=None`` means the source equals the drift (the Zvonkin equation).
    """

    name: str
    b: Field
    db: Field = _zero
    sigma: Field = _one
    dsigma: Field = _zero
    c: Field = _zero
    dc: Field = _zero
    f: Field | None = None
    df: Field | None = None
    h: Callable[[np.ndarray], np.ndarray] = lambda t: np.ones_like(t)
    alpha: float = 0.5
    Lambda: float = 2.0
    Lambda_prime: float = 2.0
    p: float = 4.0
    source_scale: float = 1.0
    random: bool = True
    drift_smooth: bool = False

    def scaled_source(self, factor: float) -> "CoefficientModel":
        return replace(self, source_scale=self.source_scale * factor)

    def with_drift(self, b: Field, db: Field, name: str | None = None) -> "CoefficientModel":
        return replace(self, b=b, db=db, name=name or self.name)

    def y_process(self, inc: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """``y`` on the grid, shape ``(..., M+1, 1)``; left-point Ito sums."""
        hk = np.asarray(self.h(grid.times[:-1]), dtype=float)
        y = np.cumsum(hk * inc[..., 0], axis=-1)
        return np.concatenate([np.zeros(y.shape[:-1] + (1,)), y], axis=-1)[..., None]

    def fields(self, inc: np.ndarray, grid: SpaceTimeGrid) -> dict:
        t = grid.time.times[:, None]
        x = grid.space.x
        y = self.y_process(inc, grid.time) if self.random else np.zeros((grid.time.steps + 1, 1))
        sig = np.asarray(self.sigma(t, x, y), dtype=float)
        b = np.asarray(self.b(t, x, y), dtype=float)
        out = {
            "a": 0.5 * sig * sig,
            "b": b,
            "c": np.asarray(self.c(t, x, y), dtype=float),
            "f": self.source_scale * (b if self.f is None else np.asarray(self.f(t, x, y), dtype=float)),
            "sigma": sig,
            "y": y,
        }
        return out

    def y_derivative_fields(self, inc: np.ndarray, grid: SpaceTimeGrid) -> dict:
        """``d_y`` of each coefficient along the sampled ``y``."""
        t = grid.time.times[:, None]
        x = grid.space.x
        y = self.y_process(inc, grid.time)
        sig = np.asarray(self.sigma(t, x, y), dtype=float)
        db = np.asarray(self.db(t, x, y), dtype=float)
        df = db if self.f is None else (np.asarray(self.df(t, x, y), dtype=float) if self.df is not None else 0.0)
        return {
            "a": sig * np.asarray(self.dsigma(t, x, y), dtype=float),
            "b": db,
            "c": np.asarray(self.dc(t, x, y), dtype=float),
            "f": self.source_scale * df,
        }


def _holder_profile(x):
    return np.abs(np.sin(x)) ** 0.5


def deterministic_model(kappa: float = 1.0) -> CoefficientModel:
    return CoefficientModel(
        "deterministic",
        b=lambda t, x, y: kappa * _holder_profile(x) + 0 * t,
        random=False,
        alpha=0.5,
        Lambda=max(2.0, 2 * kappa),
    )


def example12_model(kappa: float = 1.0) -> CoefficientModel:
    """b = kappa |sin x|^(1/2) cos(y_t), y_t = int_0^t (1 + r) dW_r."""
    return CoefficientModel(
        "example12",
        b=lambda t, x, y: kappa * _holder_profile(x) * np.cos(y),
        db=lambda t, x, y: -kappa * _holder_profile(x) * np.sin(y),
        h=lambda t: 1.0 + np.asarray(t, dtype=float),
        alpha=0.5,
        Lambda=max(2.0, 2 * kappa),
        Lambda_prime=max(2.0, 4 * kappa),
    )


def w_dependent_model(kappa: float = 1.0) -> CoefficientModel:
    """b = kappa sin(x + W_t): smooth in both arguments."""
    return CoefficientModel(
        "w-dependent",
        b=lambda t, x, y: kappa * np.sin(x + y),
        db=lambda t, x, y: kappa * np.cos(x + y),
        alpha=0.5,
        drift_smooth=True,
        Lambda=max(3.0, 3 * kappa),
        Lambda_prime=max(2.0, 2 * kappa),
    )


MODELS: dict[str, Callable[..., CoefficientModel]] = {
    "deterministic": deterministic_model,
    "example12": example12_model,
    "w-dependent": w_dependent_model,
}


def get_model(name: str, **kw) -> CoefficientModel:
    try:
        return MODELS[name](**kw)
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


def check_model(model: CoefficientModel, ens: BrownianEnsemble, grid: SpaceTimeGrid, probes: int = 8) -> dict:
    """Spot checks of the model constants on a few sampled paths."""
    from .lp_analysis import holder_norm_direct

    sub = ens.increments[:probes]
    flds = model.fields(sub, grid)
    a = np.broadcast_to(flds["a"], flds["b"].shape if np.ndim(flds["b"]) >= np.ndim(flds["a"]) else np.shape(flds["a"]))
    lam_lo, lam_hi = float(np.min(a)), float(np.max(a))
    b = np.broadcast_to(flds["b"], np.broadcast_shapes(np.shape(flds["b"]), (grid.time.steps + 1, grid.space.N)))
    hb = float(np.max(holder_norm_direct(b, model.alpha, grid.space.L)))
    report = {"lambda_range": [lam_lo, lam_hi], "b_holder": hb}
    if model.random:
        d = model.y_derivative_fields(ens.increments, grid)["b"]
        hk = np.asarray(model.h(grid.time.times[:-1]), dtype=float)
        dbs = np.abs(np.asarray(d)) * np.max(np.abs(hk))
        lp = np.mean(dbs ** (2 * model.p), axis=0) ** (1 / (2 * model.p))
        report["db_L2p_holder"] = float(np.max(holder_norm_direct(np.broadcast_to(lp, (grid.time.steps + 1, grid.space.N)), model.alpha, grid.space.L)))
    else:
        report["db_L2p_holder"] = 0.0
    report["ok"] = bool(
        1 / model.Lambda <= lam_lo
        and lam_hi <= model.Lambda
        and hb <= model.Lambda
        and report["db_L2p_holder"] <= model.Lambda_prime
    )
    return report


def solve_w(model: CoefficientModel, inc: np.ndarray, grid: SpaceTimeGrid):
    """Pathwise solution for a batch of full paths ``inc`` of shape ``(..., M, 1)``."""
    flds = model.fields(inc, grid)
    # keep one system per path even when no coefficient depends on the path
    f = np.broadcast_to(flds["f"], inc.shape[:-2] + (grid.time.steps + 1, grid.space.N))
    sl = CoefficientSlice(grid, _full(flds["a"], grid), flds["b"], flds["c"], f)
    return solve_backward(sl, warn_peclet=False), flds


def _full(arr, grid):
    """Coefficient arrays need explicit time and space axes."""
    arr = np.asarray(arr, dtype=float)
    shape = (grid.time.steps + 1, grid.space.N)
    if arr.ndim < 2:
        return np.broadcast_to(arr, shape)
    return arr


def _derivative_source(model, inc, grid, w, k_of_batch, flds):
    """``g^k`` for each batch member; ``k_of_batch`` broadcasts against the batch shape."""
    d = model.y_derivative_fields(inc, grid)
    M = grid.time.steps
    hk = np.asarray(model.h(grid.time.times[:-1]), dtype=float)
    k = np.asarray(k_of_batch)
    r = np.arange(M + 1)
    kk = np.clip(k, 0, M - 1)
    # D_k coef_r = d_y coef_r * h_k * 1{k < r}
    weight = (hk[kk][..., None] * (r > k[..., None]))[..., None]  # (..., M+1, 1)
    h = grid.space.dx
    g = 0.0
    if np.any(d["a"] != 0):
        g = g + weight * d["a"] * diff2_periodic(w, h, 2)
    if np.any(d["b"] != 0):
        g = g + weight * d["b"] * diff2_periodic(w, h, 1)
    if np.any(d["c"] != 0):
        g = g + weight * d["c"] * w
    if np.any(np.asarray(d["f"]) != 0):
        g = g + weight * d["f"]
    return np.broadcast_to(g, w.shape) if np.ndim(g) else np.zeros_like(w)


def solve_ws(model: CoefficientModel, s: float, inc: np.ndarray, grid: SpaceTimeGrid):
    """``w^s`` for one full path (or a batch); returns the ``BackwardSolution``."""
    k = grid.time.index(s)
    sol, flds = solve_w(model, inc, grid)
    if not model.random:
        from .grids import BackwardSolution

        return BackwardSolution(grid, np.zeros_like(sol.w), {"method": "zero"})
    g = _derivative_source(model, inc, grid, sol.w, np.full(sol.w.shape[:-2], k), flds)
    return solve_backward(CoefficientSlice(grid, _full(flds["a"], grid), flds["b"], flds["c"], g), warn_peclet=False)


@dataclass
class BspdePair:
    grid: SpaceTimeGrid
    u: np.ndarray  # (P, M+1, N)
    v: np.ndarray  # (P, M, N)
    u_se: np.ndarray
    v_se: np.ndarray
    path_indices: np.ndarray
    info: dict = field(default_factory=dict)


def _inner_normals(cfg: ConditionalConfig, outer_index: int, k: int, M: int, refine: int) -> np.ndarray:
    """Continuation increments in units of sqrt(dt_fine), coarsened by ``refine``.

    Drawing on the finest grid and summing keeps continuations coupled across
    time refinements.
    """
    half = cfg.K // 2 if cfg.antithetic else cfg.K
    Mf = M * refine
    if cfg.policy == "common":
        z = make_rng(cfg.seed, COMMON_INNER_STREAM, outer_index).standard_normal((half, Mf))
        z = z[:, k * refine :]
    else:
        z = make_rng(cfg.seed, INNER_STREAM, outer_index, k * refine).standard_normal((half, Mf - k * refine))
    z = z.reshape(half, M - k, refine).sum(axis=-1)
    if cfg.antithetic:
        z = np.concatenate([z, -z])
    return z


def _stderr(vals, cfg, axis):
    K = vals.shape[axis]
    if cfg.antithetic:
        half = K // 2
        a = np.take(vals, np.arange(half), axis=axis)
        b = np.take(vals, np.arange(half, K), axis=axis)
        pair = 0.5 * (a + b)
        return pair.std(axis=axis, ddof=1) / math.sqrt(half)
    return vals.std(axis=axis, ddof=1) / math.sqrt(K)


def continuation_increments(cfg, outer_inc, outer_index, ks, grid: SpaceTimeGrid, refine: int = 1) -> np.ndarray:
    """Full paths ``(len(ks), K, M, 1)``: the outer path up to ``t_k`` followed by continuations."""
    M = grid.time.steps
    dt = grid.time.dt
    inc = np.empty((len(ks), cfg.K, M, 1))
    for i, k in enumerate(ks):
        inc[i, :, :k, 0] = outer_inc[:k, 0]
        inc[i, :, k:, 0] = _inner_normals(cfg, outer_index, int(k), M, refine) * math.sqrt(dt / refine)
    return inc


def continuation_solutions(model, outer_inc, outer_index, k, grid, cfg, refine: int = 1):
    """Pathwise ``w`` for each continuation of the outer path after ``t_k``, shape ``(K, M+1, N)``."""
    inc = continuation_increments(cfg, outer_inc, outer_index, [k], grid, refine)
    return solve_w(model, inc, grid)[0].w[0]


def _pair_one_path(model, outer_inc, outer_index, grid, cfg, refine, block):
    M = grid.time.steps
    N = grid.space.N
    K = cfg.K
    u = np.zeros((M + 1, N))
    v = np.zeros((M, N))
    u_se = np.zeros((M + 1, N))
    v_se = np.zeros((M, N))
    if not model.random:
        sol, _ = solve_w(model, outer_inc[None], grid)
        u[:] = sol.w[0]
        return u, v, u_se, v_se
    ks = np.arange(M)  # u_M = 0 needs no estimate
    for lo in range(0, M, block):
        kb = ks[lo : lo + block]
        inc = continuation_increments(cfg, outer_inc, outer_index, kb, grid, refine)
        try:
            sol, flds = solve_w(model, inc, grid)
            w = sol.w  # (B, K, M+1, N)
            kgrid = np.broadcast_to(kb[:, None], (len(kb), K))
            g = _derivative_source(model, inc, grid, w, kgrid, flds)
            ws = solve_backward(CoefficientSlice(grid, _full(flds["a"], grid), flds["b"], flds["c"], g), warn_peclet=False).w
        except SolverError as exc:
            raise SolverError(
                f"outer path {outer_index}, conditioning times {kb[0]}..{kb[-1]} "
                f"(entry = (time offset, continuation, ...)): {exc}"
            ) from exc
        sel = w[np.arange(len(kb)), :, kb]  # (B, K, N)
        u[kb] = sel.mean(axis=1)
        u_se[kb] = _stderr(sel, cfg, 1)
        diag = ws[np.arange(len(kb)), :, kb]
        v[kb] = diag.mean(axis=1)
        v_se[kb] = _stderr(diag, cfg, 1)
    return u, v, u_se, v_se


def build_pair(
    model: CoefficientModel,
    ens: BrownianEnsemble,
    grid: SpaceTimeGrid,
    cfg: ConditionalConfig,
    refine: int = 1,
    block: int | None = None,
    workers: int | None = None,
) -> BspdePair:
    """Nested estimates of ``u`` at every grid time and ``v`` at every time before ``T``.

    ``refine`` draws continuations on a grid ``refine`` times finer and sums
    them, so pairs built at different step sizes share their randomness.
    """
    if ens.grid != grid.time:
        raise ModelError("ensemble and space-time grid use different time grids")
    if block is None:
        # about 4096 systems per batched solve
        block = max(1, 4096 // cfg.K)
    jobs = list(range(len(ens)))
    res = pmap(
        lambda p: _pair_one_path(model, ens.increments[p], int(ens.path_indices[p]), grid, cfg, refine, block),
        jobs,
        workers,
    )
    u, v, use, vse = (np.array([r[i] for r in res]) for i in range(4))
    return BspdePair(grid, u, v, use, vse, np.asarray(ens.path_indices), {"model": model.name, "K": cfg.K})


def solve_u(model, ens, grid, cfg, **kw):
    pair = build_pair(model, ens, grid, cfg, **kw)
    return pair.u, pair.u_se


def solve_v(model, ens, grid, cfg, **kw):
    pair = build_pair(model, ens, grid, cfg, **kw)
    return pair.v, pair.v_se


def bspde_residual(pair: BspdePair, model: CoefficientModel, ens: BrownianEnsemble) -> dict:
    """``R_k = u_k - sum_{j>=k} (L u + f) dt (trapezoid) + sum_{j>=k} v_j dW_j`` per path.

    Means are over paths, space and the times ``t_0 .. t_{M-1}``.
    """
    grid = pair.grid
    h = grid.space.dx
    dt = grid.time.dt
    flds = model.fields(ens.increments, grid)
    a = _full(flds["a"], grid)
    G = apply_operator(pair.u, a, flds["b"], flds["c"], h) + flds["f"]  # (P, M+1, N)
    G = np.broadcast_to(G, pair.u.shape)
    trap = 0.5 * dt * (G[:, :-1] + G[:, 1:])
    mart = pair.v * ens.increments[:, :, :1]
    tail = np.zeros_like(pair.u)
    # R_k = u_k - sum_{j >= k} trap_j + sum_{j >= k} mart_j
    tail[:, :-1] = np.cumsum((trap - mart)[:, ::-1], axis=1)[:, ::-1]
    R = pair.u - tail
    # R_T = 0 by construction; leaving it in would favour coarse grids
    absR = np.abs(R[:, :-1])
    per_path = absR.mean(axis=(1, 2))
    return {
        "mean_abs": float(tree_sum(list(per_path)) / len(per_path)),
        "mean_abs_by_time": absR.mean(axis=(0, 2)).tolist(),
        "sup_time_mean_abs": float(absR.mean(axis=(0, 2)).max()),
        "R": R,
    }


def residual_refinement(
    model: CoefficientModel,
    fine: BrownianEnsemble,
    space: SpaceTimeGrid,
    cfg: ConditionalConfig,
    levels=(8, 16, 32),
    workers: int | None = None,
) -> dict:
    """Mean |R| at several step counts using coarsened copies of the same outer paths."""
    from .paths import coarsen

    Mf = fine.grid.steps
    rows = []
    for M in levels:
        if Mf % M:
            raise ModelError("level must divide the fine step count")
        ens = coarsen(fine, Mf // M)
        grid = SpaceTimeGrid(space.space, ens.grid)
        pair = build_pair(model, ens, grid, cfg, refine=Mf // M, workers=workers)
        res = bspde_residual(pair, model, ens)
        rows.append({"steps": M, "dt": grid.time.dt, "mean_abs": res["mean_abs"], "v_max": float(np.max(np.abs(pair.v)))})
    dts = np.array([r["dt"] for r in rows])
    errs = np.array([r["mean_abs"] for r in rows])
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0]) if np.all(errs > 0) else float("nan")
    return {"levels": rows, "slope": slope}


# mollification


def _bump_weights(nodes: int = 200):
    """Gauss-Legendre nodes on [-1, 1] and weights that integrate against the normalised bump."""
    from .lp_analysis import _bump

    gx, gw = np.polynomial.legendre.leggauss(nodes)
    w = gw * _bump(gx)
    return gx, w / w.sum()


def mollifier_hat(xi: np.ndarray, nodes: int = 200) -> np.ndarray:
    """Fourier transform of the normalised bump on [-1, 1] (even, real)."""
    gx, w = _bump_weights(nodes)
    return np.cos(np.multiply.outer(np.asarray(xi, dtype=float), gx)) @ w


def mollify_field(arr: np.ndarray, m: float, L: float) -> np.ndarray:
    """Periodic convolution with ``rho_m(x) = m rho(m x)`` along the last axis."""
    if 2.0 / m > L:
        raise ModelError(f"mollifier of width {2 / m:.3g} exceeds the period {L:.3g}")
    N = arr.shape[-1]
    xi = 2 * np.pi * np.fft.fftfreq(N, d=L / N)
    return np.fft.ifft(np.fft.fft(arr, axis=-1) * mollifier_hat(xi / m), axis=-1).real


def mollified_model(model: CoefficientModel, m: float, grid: SpaceTimeGrid) -> CoefficientModel:
    L = grid.space.L
    if 2.0 / m > L:
        raise ModelError(f"mollifier of width {2 / m:.3g} exceeds the period {L:.3g}")
    b0, db0 = model.b, model.db

    def b(t, x, y):
        return mollify_field(np.broadcast_to(b0(t, x, y), np.broadcast_shapes(np.shape(b0(t, x, y)), (1, x.shape[-1]))), m, L)

    def db(t, x, y):
        return mollify_field(np.broadcast_to(db0(t, x, y), np.broadcast_shapes(np.shape(db0(t, x, y)), (1, x.shape[-1]))), m, L)

    return replace(model, b=b, db=db, name=f"{model.name}*rho_{m:g}")


def stability_sweep(
    model: CoefficientModel,
    ens: BrownianEnsemble,
    grid: SpaceTimeGrid,
    cfg: ConditionalConfig,
    levels=(4, 8, 16, 32),
    beta: float = 0.25,
    workers: int | None = None,
) -> dict:
    """Dyadic C^{2+beta} distances between pairs built from consecutive mollification levels.

    Every level reuses the same outer paths and inner draws.
    """
    levels = list(levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ModelError("mollification levels must increase")
    cut = build_cutoffs(grid.space.N, grid.space.L)
    pairs = [build_pair(mollified_model(model, m, grid), ens, grid, cfg, workers=workers) for m in levels]
    rows = []
    for (m1, p1), (m2, p2) in zip(zip(levels, pairs), zip(levels[1:], pairs[1:])):
        du = float(np.max(besov_sup_norm(decompose(p1.u - p2.u, cut), 2 + beta)))
        dv = float(np.max(besov_sup_norm(decompose(p1.v - p2.v, cut), 2 + beta))) if model.random else 0.0
        se = float(np.max(p1.u_se) + np.max(p2.u_se))
        rows.append({"m": m1, "m_next": m2, "u_dist": du, "v_dist": dv, "u_se": se})
    terminal_zero = all(float(np.max(np.abs(p.u[:, -1]))) == 0.0 for p in pairs)
    return {"rows": rows, "terminal_zero": terminal_zero, "beta": beta}
