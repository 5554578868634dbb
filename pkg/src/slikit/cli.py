"""Command line entry point: ``slikit generate|run|eval|sweep-init``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, SlikitError
from .metrics import write_report


def _config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _generate(args) -> dict:
    ds = pipeline.cmd_generate(_config(args), Path(args.out))
    return {"frames": len(ds.frames), "out": str(args.out)}


def _run(args) -> dict:
    out = Path(args.out)
    if args.replay:
        res = pipeline.cmd_replay(args.replay, out)
        return {"replayed": str(args.replay), "matches_manifest": res["matches_manifest"]}
    manifest = pipeline.cmd_run(_config(args), out)
    summary = {"frames": manifest["frame_count"],
               "loops_accepted": sum(1 for e in manifest["loops"] if e.get("accepted")),
               "failures": len(manifest["failures"]), **manifest.get("metrics", {})}
    if args.format == "csv":
        per_frame = {
            "frame": [f["index"] for f in manifest["frames"]],
            "fallback": [int(f["fallback"]) for f in manifest["frames"]],
            "iterations": [(f["odometry"] or {}).get("iterations", 0) for f in manifest["frames"]],
            "final_cost": [(f["odometry"] or {}).get("final_cost", "") for f in manifest["frames"]],
        }
        write_report(out / "frames.csv", per_frame, "csv")
    return summary


def _eval(args) -> dict:
    report = pipeline.cmd_eval(args.run, args.gt, args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / f"report.{args.format}", report, args.format)
    return {k: v for k, v in report.items() if not isinstance(v, list)}


def _sweep(args) -> dict:
    cfg = _config(args)
    if args.fractions:
        cfg = dataclasses.replace(cfg, sweep_fractions=[float(x) for x in args.fractions.split(",")])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = pipeline.cmd_sweep_init(cfg, out)
    table = {k: [r[k] for r in rows] for k in rows[0]} if rows else {}
    if args.format == "json":
        write_report(out / "sweep.json", {"rows": rows}, "json")
    else:
        write_report(out / "sweep.csv", table, "csv")
    return {"rows": rows}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slikit", description="Phase-image SLAM toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML or JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--format", choices=("json", "csv"), default="json")

    g = sub.add_parser("generate", help="render a synthetic dataset")
    common(g)
    g.set_defaults(func=_generate)

    r = sub.add_parser("run", help="odometry, loop detection and pose-graph refinement")
    common(r)
    r.add_argument("--replay", help="re-run only the back end from a manifest")
    r.set_defaults(func=_run)

    e = sub.add_parser("eval", help="trajectory and reconstruction metrics for a run")
    common(e)
    e.add_argument("--run", required=True, help="run output directory")
    e.add_argument("--gt", help="ground-truth TUM file (default: the run's dataset)")
    e.add_argument("--dataset", help="dataset directory (default: <run>/dataset)")
    e.set_defaults(func=_eval)

    s = sub.add_parser("sweep-init", help="odometry error versus init perturbation")
    common(s)
    s.add_argument("--fractions", help="comma separated, e.g. 0,0.1,0.2,0.4")
    s.set_defaults(func=_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = args.func(args)
    except SlikitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
