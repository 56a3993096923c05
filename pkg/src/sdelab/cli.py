"""Command-line runner: ``sdelab <experiment> [--config FILE] [--out-dir DIR] [--workers N] [--seed S]``.

Exit codes: 0 when every enabled assertion passes, 1 when any fails,
2 for unknown experiments, bad configs and other usage errors (no files are
written in that case).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import RUNNERS, ExperimentError, run, schema, write_outputs


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdelab", description="Numerical experiments for SDEs with random Holder drift.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON config; missing keys take defaults")
        sp.add_argument("--out-dir", type=Path, default=Path("."), help="directory for report.json and CSV files")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int)

    for name in RUNNERS:
        sp = sub.add_parser(name)
        common(sp)
        if name in ("bspde", "zvonkin-run", "ucp-sweep"):
            sp.add_argument("--model", choices=["deterministic", "example12", "w-dependent"])
        if name == "bspde":
            sp.add_argument("--out", type=Path, help="where to write the (u, v) pair as JSON")
    sp = sub.add_parser("run", help="run the experiment named in the config")
    common(sp)
    sc = sub.add_parser("schema", help="print the config schema of an experiment")
    sc.add_argument("experiment")
    return p


def _load(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ExperimentError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ExperimentError("config must be a JSON object")
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "schema":
            print(json.dumps(schema(args.experiment), indent=2, sort_keys=True))
            return 0
        cfg = _load(args.config)
        name = cfg.get("experiment") if args.command == "run" else args.command
        if name is None:
            raise ExperimentError("the config has no 'experiment' field")
        if getattr(args, "model", None):
            cfg["model"] = args.model
        if args.workers < 1:
            raise ExperimentError("--workers must be at least 1")
        rep = run(name, cfg, seed=args.seed, workers=args.workers)
    except ExperimentError as exc:
        print(f"sdelab: error: {exc}", file=sys.stderr)
        return 2
    extra = {}
    if getattr(args, "out", None):
        pair_name = rep.config.get("outputs", {}).get("pair", "pair.json")
        extra[args.out] = rep.artifacts.pop(pair_name)
    write_outputs(rep, args.out_dir, extra)
    for a in rep.assertions:
        print(f"{'PASS' if a['passed'] else 'FAIL'} {a['name']}: {a['value']} {a['op']} {a['bound']}")
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
