"""Named experiments: defaults, a JSON schema per experiment, runners and report writing."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from . import __version__
from .parallel import set_default_workers


class ExperimentError(ValueError):
    """Unknown experiment or invalid config (the CLI maps this to exit code 2)."""


@dataclass
class Report:
    experiment: str
    config: dict
    results: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)  # file name -> text
    seconds: float = 0.0

    def check(self, name: str, value, bound, op: str = "<=") -> bool:
        value = _plain(value)
        ok = {
            "<=": lambda a, b: a <= b,
            "<": lambda a, b: a < b,
            ">=": lambda a, b: a >= b,
            "==": lambda a, b: a == b,
        }[op](value, bound)
        self.assertions.append({"name": name, "value": value, "op": op, "bound": bound, "passed": bool(ok)})
        return bool(ok)

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.assertions)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "version": __version__,
            "config": self.config,
            "results": _plain(self.results),
            "assertions": self.assertions,
            "passed": self.passed,
            "timing": {"seconds": self.seconds},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _plain(obj):
    """JSON-ready copy: numpy scalars and arrays become floats and lists; NaN becomes None."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def csv_text(header, rows) -> str:
    """Comma-separated, '.' decimal, 17 significant digits."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([format(v, ".17g") if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


# schema

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer", "minimum": 1}
_EXPR = {"type": ["string", "number"]}
_MODELS = ["deterministic", "example12", "w-dependent"]

_COMMON = {
    "experiment": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "outputs": {"type": "object", "additionalProperties": {"type": "string"}},
}

PARAMETERS: dict[str, dict] = {
    "lp-analyze": {
        "field": {"type": "string"},
        "N": _INT,
        "L": _POS,
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "corpus": {"type": "integer", "minimum": 0},
    },
    "pde-solve": {
        "N": _INT, "M": _INT, "T": _POS, "L": _POS,
        "a": _EXPR, "b": _EXPR, "c": _EXPR, "f": _EXPR,
        "rannacher": {"type": "integer", "minimum": 0},
        "duhamel_tolerance": _POS,
    },
    "clark-ocone": {
        "functional": {"enum": ["w1", "w1sq", "expmart", "integral-of-w"]},
        "steps": _INT, "paths": _INT, "chunk": _INT, "K": {"type": "integer", "minimum": 2},
        "bound": _POS,
    },
    "bspde": {
        "model": {"enum": _MODELS},
        "N": _INT, "M": _INT, "L": _POS, "K": {"type": "integer", "minimum": 2}, "paths": _INT,
        "policy": {"enum": ["independent", "common"]}, "antithetic": {"type": "boolean"},
        "kappa": _POS,
    },
    "zvonkin-run": {
        "model": {"enum": _MODELS},
        "N": _INT, "L": _POS, "steps_per_unit": _INT, "dt": _POS, "paths": _INT,
        "x0": _NUM, "box": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "K": {"type": "integer", "minimum": 2}, "lattice_steps": _INT, "kappa": _POS,
        "conjugacy_bound": _POS,
    },
    "nonuniqueness": {
        "dt": {"type": "number", "exclusiveMinimum": 0, "maximum": 2**-8},
        "deltas": {"type": "array", "items": _POS, "minItems": 1},
        "paths": _INT,
    },
    "ucp-sweep": {
        "model": {"enum": _MODELS},
        "m_list": {"type": "array", "items": _POS, "minItems": 2},
        "dt": _POS, "horizon": _POS, "paths": {"type": "integer", "minimum": 2}, "L": _POS, "kappa": _POS,
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1, "maxItems": 4},
    },
    "ito-wentzell": {
        "recipe": {"enum": ["identity", "quadratic", "cross"]},
        "dt": _POS, "paths": {"type": "integer", "minimum": 2}, "drop_cross": {"type": "boolean"}, "bound": _POS,
    },
}

DEFAULTS: dict[str, dict] = {
    "lp-analyze": {"field": "abs(sin(x))**0.5", "N": 1024, "L": 16 * math.pi, "alpha": 0.5, "corpus": 0},
    "pde-solve": {
        "N": 256, "M": 256, "T": 1.0, "L": 2 * math.pi, "a": 0.1, "b": 0.0, "c": 0.0,
        "f": "cos(x)*(1 + t)", "rannacher": 0, "duhamel_tolerance": 1e-4,
    },
    "clark-ocone": {"functional": "w1sq", "steps": 1024, "paths": 10000, "chunk": 1000, "K": 64, "bound": 0.05},
    "bspde": {
        "model": "example12", "N": 128, "M": 32, "L": 4 * math.pi, "K": 64, "paths": 200,
        "policy": "common", "antithetic": True, "kappa": 1.0,
    },
    "zvonkin-run": {
        "model": "deterministic", "N": 256, "L": 2 * math.pi, "steps_per_unit": 256, "dt": 2**-10, "paths": 1000,
        "x0": 0.0, "box": None, "K": 32, "lattice_steps": 16, "kappa": 1.0, "conjugacy_bound": 0.05,
    },
    "nonuniqueness": {"dt": 2**-10, "deltas": [1e-6, 1e-5, 1e-4, 1e-3], "paths": 100},
    "ucp-sweep": {
        "model": "example12", "m_list": [4, 8, 16, 32], "dt": 2**-9, "horizon": 0.5, "paths": 400,
        "L": 2 * math.pi, "kappa": 1.0, "seeds": [],
    },
    "ito-wentzell": {"recipe": "quadratic", "dt": 2**-12, "paths": 1000, "drop_cross": False, "bound": 0.05},
}


def schema(experiment: str) -> dict:
    if experiment not in PARAMETERS:
        raise ExperimentError(f"unknown experiment {experiment!r}; choose from {sorted(PARAMETERS)}")
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": f"sdelab {experiment} config",
        "type": "object",
        "properties": {**_COMMON, **PARAMETERS[experiment]},
        "additionalProperties": False,
    }


def resolve_config(experiment: str, config: dict | None = None, seed: int | None = None) -> dict:
    """Validate ``config`` and fill in defaults; ``seed`` overrides the config seed."""
    if experiment not in RUNNERS:
        raise ExperimentError(f"unknown experiment {experiment!r}; choose from {sorted(RUNNERS)}")
    config = copy.deepcopy(config or {})
    if config.get("experiment", experiment) != experiment:
        raise ExperimentError(f"config names experiment {config['experiment']!r}, not {experiment!r}")
    try:
        jsonschema.validate(config, schema(experiment))
    except jsonschema.ValidationError as exc:
        raise ExperimentError(f"config does not match the {experiment} schema: {exc.message}") from None
    out = {**copy.deepcopy(DEFAULTS[experiment]), **config, "experiment": experiment}
    out["seed"] = int(seed if seed is not None else config.get("seed", 0))
    return out


# runners


def _lp_analyze(cfg: dict, rep: Report):
    from .expr import compile_expr
    from .lp_analysis import bernstein_check, build_cutoffs, decompose, field_report, holder_corpus

    N, L, alpha = cfg["N"], cfg["L"], cfg["alpha"]
    cut = build_cutoffs(N, L)
    f = np.broadcast_to(compile_expr(cfg["field"], ("x",))(x=cut.x), (N,)).astype(float)
    fields = [f]
    if cfg["corpus"]:
        fields += list(holder_corpus(cut.x, cfg["corpus"], seed=cfg["seed"], L=L))
    recon, worst_b = 0.0, 0.0
    for g in fields:
        dec = decompose(g, cut)
        recon = max(recon, float(np.max(np.abs(dec.reconstruct() - g)) / max(np.max(np.abs(g)), 1e-300)))
        for k in (1, 2):
            worst_b = max([worst_b, *bernstein_check(dec, k).values()])
    report = field_report(f, alpha, L)
    rep.results.update({"field": report, "fields": len(fields), "reconstruction_error": recon, "bernstein_max": worst_b})
    rep.check("reconstruction", recon, 1e-10)
    rep.check("bernstein", worst_b, 10.0)
    rep.artifacts["blocks.csv"] = csv_text(
        ["j", "sup", "weighted"], [(b["j"], b["sup"], b["weighted"]) for b in report["blocks"]]
    )


def _pde_solve(cfg: dict, rep: Report):
    from .expr import field_tx
    from .gaussian_kernel import DiffusionSchedule, duhamel_solution
    from .grids import SpaceTimeGrid
    from .kolmogorov import CoefficientSlice, integral_residual, solve_backward

    grid = SpaceTimeGrid.make(cfg["N"], cfg["M"], cfg["T"], cfg["L"])
    sl = CoefficientSlice.from_functions(
        grid, field_tx(cfg["a"]), field_tx(cfg["b"]), field_tx(cfg["c"]), field_tx(cfg["f"])
    )
    sol = solve_backward(sl, rannacher=cfg["rannacher"], warn_peclet=False)
    res = integral_residual(sol, sl)
    rep.results.update({"integral_residual": res, "sup_w0": float(np.max(np.abs(sol.slice(0)))), "peclet": sol.info["peclet"]})
    rep.check("integral_residual", res, 1e-10)
    if all(isinstance(cfg[k], (int, float)) for k in ("a", "b", "c")) and cfg["b"] == 0 and cfg["c"] == 0:
        ref = duhamel_solution(DiffusionSchedule.constant(float(cfg["a"])), sl.f if sl.f.ndim else np.full((grid.time.steps + 1, grid.space.N), float(sl.f)), grid)
        diff = float(np.max(np.abs(ref.w - sol.w)))
        rep.results["duhamel_difference"] = diff
        rep.check("duhamel_oracle", diff, cfg["duhamel_tolerance"])
    rep.artifacts["w0.csv"] = csv_text(["x", "w0"], zip(grid.space.x, sol.slice(0)))


def _clark_ocone(cfg: dict, rep: Report):
    from .malliavin import ConditionalConfig, clark_ocone_reconstruct, get_functional
    from .parallel import pmap, tree_sum
    from .paths import SeedSpec, TimeGrid, sample_ensemble

    F = get_functional(cfg["functional"])
    grid = TimeGrid(1.0, cfg["steps"])
    P, chunk = cfg["paths"], cfg["chunk"]
    starts = list(range(0, P, chunk))
    ens = [sample_ensemble(SeedSpec(cfg["seed"], s), min(chunk, P - s), grid) for s in starts]
    vals = pmap(lambda e: F(e.increments, grid), ens)
    mean = float(tree_sum([v.sum() for v in vals]) / P)
    icfg = ConditionalConfig(K=cfg["K"], seed=cfg["seed"])
    parts = pmap(lambda e: clark_ocone_reconstruct(F, e, icfg, mean=mean), ens)
    err = np.concatenate([p["errors"] for p in parts])
    rec = np.concatenate([p["reconstruction"] for p in parts])
    F_all = np.concatenate(vals)
    mean_err = float(tree_sum([p["errors"].sum() for p in parts]) / P)
    rep.results.update({"EF": mean, "mean_error": mean_err, "dt": grid.dt})
    rep.check("mean_error", mean_err, cfg["bound"], "<")
    rep.artifacts["paths.csv"] = csv_text(["path", "F", "reconstruction", "error"], zip(range(P), F_all, rec, err))


def _model(cfg):
    from .bspde import get_model

    return get_model(cfg["model"], kappa=cfg.get("kappa", 1.0))


def _bspde(cfg: dict, rep: Report):
    from .bspde import build_pair, bspde_residual
    from .grids import SpaceGrid, SpaceTimeGrid
    from .malliavin import ConditionalConfig
    from .paths import TimeGrid, sample_ensemble

    model = _model(cfg)
    grid = SpaceTimeGrid(SpaceGrid(cfg["N"], cfg["L"]), TimeGrid(1.0, cfg["M"]))
    ens = sample_ensemble(cfg["seed"], cfg["paths"], grid.time)
    icfg = ConditionalConfig(K=cfg["K"], seed=cfg["seed"], policy=cfg["policy"], antithetic=cfg["antithetic"])
    pair = build_pair(model, ens, grid, icfg)
    res = bspde_residual(pair, model, ens)
    rep.results.update(
        {
            "residual_mean_abs": res["mean_abs"],
            "residual_by_time": res["mean_abs_by_time"],
            "u_max": float(np.max(np.abs(pair.u))),
            "v_max": float(np.max(np.abs(pair.v))),
            "u_stderr_max": float(np.max(pair.u_se)),
        }
    )
    rep.check("u_terminal_zero", float(np.max(np.abs(pair.u[:, -1]))), 0.0, "==")
    if not model.random:
        rep.check("v_zero_deterministic", float(np.max(np.abs(pair.v))), 0.0, "==")
    rep.check("residual_finite", bool(np.isfinite(res["mean_abs"])), True, "==")
    pair_doc = {
        "model": model.name,
        "x": grid.space.x,
        "t": grid.time.times,
        "path_indices": pair.path_indices,
        "u": pair.u,
        "v": pair.v,
        "u_stderr": pair.u_se,
        "v_stderr": pair.v_se,
    }
    rep.artifacts[cfg.get("outputs", {}).get("pair", "pair.json")] = json.dumps(_plain(pair_doc), allow_nan=False) + "\n"
    rep.artifacts["residual.csv"] = csv_text(["t", "mean_abs_residual"], zip(grid.time.times[:-1], res["mean_abs_by_time"]))


def _zvonkin_run(cfg: dict, rep: Report):
    from .bspde import build_pair
    from .grids import SpaceGrid, SpaceTimeGrid
    from .malliavin import ConditionalConfig
    from .paths import BrownianEnsemble, TimeGrid, coarsen, sample_ensemble
    from .zvonkin import (
        SdeRunConfig,
        choose_horizon,
        conjugacy_error,
        euler_direct,
        euler_transformed,
        frame_from_pair,
        frame_from_solution,
        invert_phi,
        transform_coefficients,
    )

    model = _model(cfg)
    hz = choose_horizon(model, N=cfg["N"], L=cfg["L"], steps_per_unit=cfg["steps_per_unit"], seed=cfg["seed"])
    T = hz.T
    dt = cfg["dt"]
    steps = int(round(T / 2 / dt))
    horizon = steps * dt
    full = sample_ensemble(cfg["seed"], cfg["paths"], TimeGrid(2 * horizon, 2 * steps))
    if model.random:
        lat = cfg["lattice_steps"]
        if (2 * steps) % lat:
            raise ExperimentError("lattice_steps must divide the number of Euler steps on [0, T]")
        outer = coarsen(full, (2 * steps) // lat)
        grid = SpaceTimeGrid(SpaceGrid(cfg["N"], cfg["L"]), outer.grid)
        pair = build_pair(model, outer, grid, ConditionalConfig(K=cfg["K"], seed=cfg["seed"], policy="common", antithetic=True))
        frame = frame_from_pair(pair)
    else:
        sol = hz.solution
        frame = frame_from_solution(sol)
    run_cfg = SdeRunConfig(dt, horizon, cfg["paths"], cfg["x0"], cfg["box"])
    ens = BrownianEnsemble(run_cfg.grid, full.increments[:, :steps], full.seed, full.path_indices)
    tc = transform_coefficients(frame, model)
    Xd = euler_direct(model, run_cfg, ens)
    run = euler_transformed(tc, run_cfg, ens)
    err = conjugacy_error(Xd, run)
    probes = np.linspace(-20, 20, 1000)
    if frame.u.shape[0] > 1:
        probes = np.broadcast_to(probes, (frame.u.shape[0], 1000))
    trip = max(float(np.max(np.abs(frame.phi(t, invert_phi(frame, t, probes)) - probes))) for t in (0.0, T / 4, T / 2))
    sandwich = frame.sandwich_check()
    rep.results.update(
        {
            "T": T,
            "horizon": horizon,
            "g_star": frame.g_star,
            "grad_range": list(frame.grad_range),
            "sandwich": sandwich,
            "round_trip": trip,
            "conjugacy_error": err,
            "excluded_fraction": run.excluded_fraction,
            "horizon_history": hz.history,
            "lipschitz": tc.lipschitz_report(),
        }
    )
    rep.check("gradient_bound", frame.g_star, 0.5)
    rep.check("sandwich_min", sandwich["min_ratio"], 0.5, ">=")
    rep.check("sandwich_max", sandwich["max_ratio"], 1.5)
    rep.check("round_trip", trip, 1e-9)
    if not model.random:
        rep.check("conjugacy", err, cfg["conjugacy_bound"])
    keep = ~run.excluded
    rows = zip(
        run_cfg.grid.times,
        Xd[keep].mean(axis=0),
        run.X[keep].mean(axis=0),
        np.abs(Xd[keep] - run.X[keep]).mean(axis=0),
    )
    rep.artifacts["conjugacy.csv"] = csv_text(["t", "mean_X_direct", "mean_X_transformed", "mean_abs_difference"], rows)


def _nonuniqueness(cfg: dict, rep: Report):
    from .zvonkin import nonuniqueness_demo

    r = nonuniqueness_demo(cfg["dt"], tuple(cfg["deltas"]), cfg["paths"], cfg["seed"])
    rep.results.update(r)
    rep.check("branch_zero_residual", r["branch_zero_residual"], 0.05)
    rep.check("branch_quadratic_residual", r["branch_quadratic_residual"], 0.05)
    rep.check("euler_zero_start_stays", r["euler_zero_max"], 1e-6, "<")
    rep.check("perturbed_start_reaches_quadratic", max(p["terminal_gap"] for p in r["perturbed"]), 0.1, "<")
    rep.artifacts["branches.csv"] = csv_text(["delta", "terminal_gap"], [(p["delta"], p["terminal_gap"]) for p in r["perturbed"]])


def _ucp_sweep(cfg: dict, rep: Report):
    from .zvonkin import SdeRunConfig, seed_agreement, ucp_cauchy_experiment

    model = _model(cfg)
    run_cfg = SdeRunConfig(cfg["dt"], cfg["horizon"], cfg["paths"])
    seeds = cfg["seeds"] or [cfg["seed"], cfg["seed"] + 1]
    reps = [ucp_cauchy_experiment(model, tuple(cfg["m_list"]), run_cfg, s, cfg["L"]) for s in seeds]
    rep.results["sweeps"] = reps
    for r in reps:
        rep.check(f"seed_{r['seed']}_violations", r["violations"], 1)
        rep.check(f"seed_{r['seed']}_violations_within_noise", r["violations_within_noise"], True, "==")
    if len(reps) > 1:
        rep.check("seed_agreement", all(seed_agreement(reps[0], r) for r in reps[1:]), True, "==")
    rep.artifacts["cauchy.csv"] = csv_text(
        ["seed", "m", "distance", "stderr"], [(r["seed"], row["m"], row["distance"], row["stderr"]) for r in reps for row in r["rows"]]
    )


def _ito_wentzell(cfg: dict, rep: Report):
    from .zvonkin import RECIPES, ito_wentzell_check

    r = ito_wentzell_check(RECIPES[cfg["recipe"]], cfg["dt"], cfg["paths"], cfg["seed"], drop_cross=cfg["drop_cross"])
    rep.results.update(r)
    rep.check("residual", r["mean_sup_residual"], cfg["bound"], "<")
    rep.artifacts["summary.csv"] = csv_text(["recipe", "dt", "mean_sup_residual", "stderr"], [(r["recipe"], r["dt"], r["mean_sup_residual"], r["stderr"])])


RUNNERS: dict[str, Callable[[dict, Report], None]] = {
    "lp-analyze": _lp_analyze,
    "pde-solve": _pde_solve,
    "clark-ocone": _clark_ocone,
    "bspde": _bspde,
    "zvonkin-run": _zvonkin_run,
    "nonuniqueness": _nonuniqueness,
    "ucp-sweep": _ucp_sweep,
    "ito-wentzell": _ito_wentzell,
}


def run(experiment: str, config: dict | None = None, seed: int | None = None, workers: int = 1) -> Report:
    cfg = resolve_config(experiment, config, seed)
    set_default_workers(workers)
    rep = Report(experiment, cfg)
    start = time.perf_counter()
    try:
        RUNNERS[experiment](cfg, rep)
    except ExperimentError:
        raise
    except Exception as exc:
        raise RuntimeError(f"{experiment} failed: {exc}") from exc
    finally:
        set_default_workers(1)
    rep.seconds = time.perf_counter() - start
    return rep


def write_outputs(rep: Report, out_dir: str | os.PathLike, extra: dict | None = None) -> list[Path]:
    """Write report.json and artifacts; every file goes to a temp name first and is renamed at the end."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"report.json": rep.to_json(), **rep.artifacts}
    targets = {out / name: text for name, text in files.items()}
    for path, text in (extra or {}).items():
        targets[Path(path)] = text
    staged = []
    try:
        for path, text in targets.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
    return [p for _, p in staged]
