"""Malliavin calculus on discretized Wiener space.

A functional receives increments of shape ``(..., M, d)`` and returns one
value (or one array of values) per leading index.  Its derivative is the
step function ``DF_k = dF / d(Delta W_k)``, which is exactly the element of H
that pairs with Cameron-Martin shifts of the grid path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .paths import (
    COMMON_INNER_STREAM,
    INNER_STREAM,
    BrownianEnsemble,
    BrownianPath,
    CameronMartinDirection,
    TimeGrid,
    make_rng,
    shift_path,
)


class MalliavinError(ValueError):
    pass


Evaluator = Callable[[np.ndarray, TimeGrid], np.ndarray]


@dataclass(frozen=True)
class PathFunctional:
    name: str
    evaluate: Evaluator
    derivative: Evaluator | None = None
    conditional_derivative: Evaluator | None = None

    def __call__(self, increments: np.ndarray, grid: TimeGrid) -> np.ndarray:
        return self.evaluate(np.asarray(increments, dtype=float), grid)


def _values(inc):
    return np.cumsum(inc, axis=-2)


def _terminal(inc):
    return inc.sum(axis=(-2, -1))


def _w_left(inc):
    """W at the left end of every interval, shape (..., M, d)."""
    v = np.cumsum(inc, axis=-2)
    return v - inc


def w1() -> PathFunctional:
    return PathFunctional(
        "w1",
        lambda inc, g: _terminal(inc),
        lambda inc, g: np.ones_like(inc),
        lambda inc, g: np.ones_like(inc),
    )


def w1_squared() -> PathFunctional:
    return PathFunctional(
        "w1sq",
        lambda inc, g: _terminal(inc) ** 2,
        lambda inc, g: 2 * _terminal(inc)[..., None, None] * np.ones_like(inc),
        lambda inc, g: 2 * _w_left(inc),
    )


def exponential_martingale(h: float = 1.0) -> PathFunctional:
    """exp(h W_1 - h^2/2) with E^t D_t F = h exp(h W_t - h^2 t / 2)."""

    def ev(inc, g):
        return np.exp(h * _terminal(inc) - 0.5 * h * h * g.t_end)

    def dev(inc, g):
        return h * ev(inc, g)[..., None, None] * np.ones_like(inc)

    def cdev(inc, g):
        t = g.times[:-1].reshape((-1, 1))
        return h * np.exp(h * _w_left(inc) - 0.5 * h * h * t)

    return PathFunctional("expmart", ev, dev, cdev)


def integral_of_w() -> PathFunctional:
    """Left-point sum of W dt; DF_k = (M - 1 - k) dt is deterministic."""

    def ev(inc, g):
        return (_w_left(inc).sum(axis=-2) * g.dt).sum(axis=-1)

    def dev(inc, g):
        weights = (g.steps - 1 - np.arange(g.steps)) * g.dt
        return np.broadcast_to(weights[:, None], inc.shape).copy()

    return PathFunctional("integral-of-w", ev, dev, dev)


def indicator_positive() -> PathFunctional:
    """1{W_1 > 0}; its a.e. derivative is zero, so difference quotients do not converge to it."""
    return PathFunctional(
        "indicator",
        lambda inc, g: (_terminal(inc) > 0).astype(float),
        lambda inc, g: np.zeros_like(inc),
    )


FUNCTIONALS: dict[str, Callable[[], PathFunctional]] = {
    "w1": w1,
    "w1sq": w1_squared,
    "expmart": exponential_martingale,
    "integral-of-w": integral_of_w,
}


def get_functional(name: str) -> PathFunctional:
    try:
        return FUNCTIONALS[name]()
    except KeyError:
        raise MalliavinError(f"unknown functional {name!r}; choose from {sorted(FUNCTIONALS)}") from None


def directional_derivative(F: PathFunctional, path, h: CameronMartinDirection, eps: float):
    """(F(omega + eps int h) - F(omega)) / eps; per path for an ensemble."""
    if eps == 0:
        raise MalliavinError("eps must be nonzero")
    shifted = shift_path(path, h, eps)
    return (F(shifted.increments, path.grid) - F(path.increments, path.grid)) / eps


def h_pairing(DF: np.ndarray, h: CameronMartinDirection) -> np.ndarray:
    return h.inner(DF)


def derivative_criterion_check(
    F: PathFunctional,
    ensemble: BrownianEnsemble,
    h: CameronMartinDirection,
    q: float = 1.0,
    eps_list=tuple(2.0**-k for k in range(3, 9)),
) -> dict:
    """E|D^h_eps F - <DF, h>|^q per eps and the fitted log-log slope in eps."""
    if F.derivative is None:
        raise MalliavinError(f"functional {F.name} has no analytic derivative")
    if q < 1:
        raise MalliavinError("q must be >= 1")
    exact = h_pairing(F.derivative(ensemble.increments, ensemble.grid), h)
    errs = []
    for eps in eps_list:
        d = directional_derivative(F, ensemble, h, eps)
        errs.append(float(np.mean(np.abs(d - exact) ** q)))
    errs = np.array(errs)
    eps = np.asarray(eps_list, dtype=float)
    positive = errs > 0
    if positive.sum() >= 2:
        slope = float(np.polyfit(np.log(eps[positive]), np.log(errs[positive]), 1)[0])
    else:
        slope = float("inf")
    tiny = bool(np.all(errs <= 1e-20 + 1e-12 * np.mean(np.abs(exact) ** q)))
    return {
        "functional": F.name,
        "q": q,
        "eps": eps.tolist(),
        "errors": errs.tolist(),
        "slope": slope,
        "all_zero": tiny,
        "converges": bool(tiny or slope >= 0.5),
    }


@dataclass(frozen=True)
class ConditionalConfig:
    """Nested resimulation settings.

    ``policy='independent'`` keys each continuation block by
    ``(outer path, time index)``; ``'common'`` draws one block per outer path
    and reuses its tail for every conditioning time.
    """

    K: int = 64
    seed: int = 0
    policy: str = "independent"
    antithetic: bool = False
    chunk: int = 16

    def __post_init__(self):
        if self.K < 2:
            raise MalliavinError("K must be >= 2")
        if self.policy not in ("independent", "common"):
            raise MalliavinError("policy must be 'independent' or 'common'")
        if self.antithetic and self.K % 2:
            raise MalliavinError("antithetic sampling needs an even K")


@dataclass
class ConditionalEstimate:
    mean: np.ndarray
    stderr: np.ndarray


def _continuations(cfg: ConditionalConfig, outer_index: int, k: int, grid: TimeGrid, d: int) -> np.ndarray:
    """Normalised continuation increments for steps k..M-1, shape (K, M - k, d)."""
    M = grid.steps
    half = cfg.K // 2 if cfg.antithetic else cfg.K
    if cfg.policy == "independent":
        z = make_rng(cfg.seed, INNER_STREAM, outer_index, k).standard_normal((half, M - k, d))
    else:
        z = make_rng(cfg.seed, COMMON_INNER_STREAM, outer_index).standard_normal((half, M, d))[:, k:]
    if cfg.antithetic:
        z = np.concatenate([z, -z])
    return z * np.sqrt(grid.dt)


def _as_ensemble(path) -> BrownianEnsemble:
    if isinstance(path, BrownianPath):
        return BrownianEnsemble(path.grid, path.increments[None])
    return path


def conditional_map(
    G: Callable[[np.ndarray, TimeGrid], np.ndarray],
    k: int,
    ens: BrownianEnsemble,
    cfg: ConditionalConfig,
) -> ConditionalEstimate:
    """Nested estimate of E^{t_k} G for every outer path (``G`` maps increments to values)."""
    grid = ens.grid
    M, d = grid.steps, ens.d
    P = len(ens)
    means, ses = [], []
    for lo in range(0, P, cfg.chunk):
        hi = min(lo + cfg.chunk, P)
        block = np.empty((hi - lo, cfg.K, M, d))
        block[:, :, :k] = ens.increments[lo:hi, None, :k]
        if k < M:
            for p in range(lo, hi):
                block[p - lo, :, k:] = _continuations(cfg, int(ens.path_indices[p]), k, grid, d)
        vals = np.asarray(G(block, grid), dtype=float)
        means.append(vals.mean(axis=1))
        if cfg.antithetic:
            half = cfg.K // 2
            pair = 0.5 * (vals[:, :half] + vals[:, half:])
            ses.append(pair.std(axis=1, ddof=1) / np.sqrt(half))
        else:
            ses.append(vals.std(axis=1, ddof=1) / np.sqrt(cfg.K))
    return ConditionalEstimate(np.concatenate(means), np.concatenate(ses))


def conditional_expectation(F: PathFunctional, t: float, path, cfg: ConditionalConfig) -> ConditionalEstimate:
    """E(F | F_t) by freezing increments on [0, t] and resampling the rest."""
    ens = _as_ensemble(path)
    k = ens.grid.index(t)
    return conditional_map(F.evaluate, k, ens, cfg)


def conditional_derivative_mc(F: PathFunctional, ens: BrownianEnsemble, cfg: ConditionalConfig) -> np.ndarray:
    """E^{t_k} D_{t_k} F for all k by nested simulation; shape (P, M, d)."""
    if F.derivative is None:
        raise MalliavinError("nested Clark-Ocone needs an analytic derivative")
    out = np.empty(ens.increments.shape)
    for k in range(ens.grid.steps):
        est = conditional_map(lambda inc, g, k=k: F.derivative(inc, g)[..., k, :], k, ens, cfg)
        out[:, k, :] = est.mean
    return out


def clark_ocone_reconstruct(
    F: PathFunctional,
    ens: BrownianEnsemble,
    cfg: ConditionalConfig | None = None,
    mean: float | None = None,
) -> dict:
    """Per-path error of ``EF + sum_k E^{t_k} D_{t_k} F . Delta W_k``.

    ``EF`` is the ensemble mean unless ``mean`` is supplied (useful when the
    ensemble is processed in chunks).
    """
    grid = ens.grid
    if F.conditional_derivative is not None:
        integrand = F.conditional_derivative(ens.increments, grid)
    elif F.derivative is not None:
        integrand = conditional_derivative_mc(F, ens, cfg or ConditionalConfig())
    else:
        raise MalliavinError(f"functional {F.name} has no derivative")
    vals = F(ens.increments, grid)
    ef = float(np.mean(vals)) if mean is None else float(mean)
    recon = ef + np.sum(integrand * ens.increments, axis=(-2, -1))
    err = np.abs(vals - recon)
    return {"functional": F.name, "EF": ef, "errors": err, "mean_error": float(err.mean()), "reconstruction": recon}


@dataclass(frozen=True)
class TimeFamily:
    """A family ``r -> ydot_r`` on the grid with its Malliavin derivative.

    ``value(k, inc, grid)`` returns ``ydot_{t_k}``; ``derivative(k, inc, grid)``
    returns ``D ydot_{t_k}`` as a step function of shape ``(..., M, d)``.
    """

    value: Callable[[int, np.ndarray, TimeGrid], np.ndarray]
    derivative: Callable[[int, np.ndarray, TimeGrid], np.ndarray] | None = None


def ety_decompose(
    y0: PathFunctional,
    ydot: TimeFamily,
    ens: BrownianEnsemble,
    cfg: ConditionalConfig,
) -> dict:
    """Check E^t y_t = E y_0 + int_0^t E^s ydot_s ds + int_0^t E^s y_{s,s} dW_s on the grid.

    ``y_t = y_0 + sum_{j<k} ydot_{t_j} dt`` and
    ``y_{s,t} = D_s y_0 + sum_{j<k} D_s ydot_{t_j} dt``.
    The left side is a nested estimate at every grid time; the right side uses
    nested estimates of ``ydot_{t_i}`` and ``y_{t_i,t_i}`` at ``t_i``.
    """
    if y0.derivative is None or ydot.derivative is None:
        raise MalliavinError("decomposition needs analytic derivatives of y0 and ydot")
    grid = ens.grid
    M, dt = grid.steps, grid.dt
    P = len(ens)

    def y_at(k):
        def G(inc, g):
            out = y0(inc, g)
            for j in range(k):
                out = out + ydot.value(j, inc, g) * dt
            return out

        return G

    def y_diag(i):
        def G(inc, g):
            out = y0.derivative(inc, g)[..., i, :]
            for j in range(i):
                out = out + ydot.derivative(j, inc, g)[..., i, :] * dt
            return out

        return G

    lhs = np.zeros((M + 1, P))
    lhs_se = np.zeros((M + 1, P))
    for k in range(M + 1):
        est = conditional_map(y_at(k), k, ens, cfg)
        lhs[k], lhs_se[k] = est.mean, est.stderr
    ey0 = float(np.mean(y0(ens.increments, grid)))
    drift = np.zeros((M + 1, P))
    mart = np.zeros((M + 1, P))
    rhs_var = np.zeros((M + 1, P))
    dw = ens.increments
    for i in range(M):
        e1 = conditional_map(lambda inc, g, i=i: ydot.value(i, inc, g), i, ens, cfg)
        e2 = conditional_map(y_diag(i), i, ens, cfg)
        e2m = e2.mean.reshape(P, -1)
        drift[i + 1] = drift[i] + e1.mean * dt
        mart[i + 1] = mart[i] + np.sum(e2m * dw[:, i, :], axis=-1)
        rhs_var[i + 1] = rhs_var[i] + (e1.stderr * dt) ** 2 + np.sum((e2.stderr.reshape(P, -1) * dw[:, i, :]) ** 2, axis=-1)
    rhs = ey0 + drift + mart
    resid = np.abs(lhs - rhs).mean(axis=1)
    mc_err = (lhs_se + np.sqrt(rhs_var)).mean(axis=1)
    y0_se = float(np.std(y0(ens.increments, grid)) / np.sqrt(P)) if P > 1 else 0.0
    return {
        "residual_by_time": resid.tolist(),
        "residual": float(resid.max()),
        "mc_error": float(mc_err.max() + y0_se),
        "dt_error": float(np.sqrt(dt)),
        "lhs": lhs,
        "rhs": rhs,
    }
