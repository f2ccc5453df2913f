"""``tmslab`` command line: run, sweep, gen-data and verify-theory.

Exit codes: 0 success, 1 a bound was violated, 2 configuration or usage
error, 3 training diverged, 4 a trajectory buffer is missing an entry.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config, pipeline, theory
from .errors import ConfigError, IncompleteBufferError, TrainingDivergedError

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_BUFFER = 4

WORKDIR_ENV = "TMSLAB_WORKDIR"


def _workdir(cfg: config.LabConfig) -> Path:
    return Path(os.environ.get(WORKDIR_ENV) or cfg.paths.workdir)


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print("\n".join(lines))


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def cmd_run(args) -> int:
    cfg = config.load(args.config)
    workdir = _workdir(cfg)
    reports = pipeline.run(cfg, workdir)
    lines = [f"workdir {workdir}", "method     seed  target_avg  forgetting  kl_to_base  pld_val"]
    for r in reports:
        lines.append(f"{r.method:<10} {r.seed:>4}  {_fmt(r.target_avg):>10}  {_fmt(r.forgetting):>10}  "
                     f"{_fmt(r.kl_to_base):>10}  {_fmt(r.pld_val):>7}")
    _emit(args, {"workdir": str(workdir), "reports": [r.to_json() for r in reports]}, lines)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = config.load(args.config)
    workdir = _workdir(cfg)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = pipeline.sweep(cfg, args.axis, values, workdir)
    header = pipeline.SWEEP_HEADER
    lines = [f"workdir {workdir}", "  ".join(header)]
    lines += ["  ".join([str(r[0]), *(_fmt(x) for x in r[1:])]) for r in rows]
    payload = {"workdir": str(workdir), "axis": args.axis,
               "rows": [dict(zip(header, (r[0], *(pipeline.json_float(x) for x in r[1:])))) for r in rows]}
    _emit(args, payload, lines)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = config.load(args.config)
    paths = pipeline.gen_data(cfg, _workdir(cfg))
    _emit(args, {"files": [str(p) for p in paths]}, [str(p) for p in paths])
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    if args.trial is not None:
        first, trials = args.trial, 1
    else:
        first, trials = 0, args.trials
    if trials < 1 or first < 0:
        raise ConfigError("--trials must be >= 1 and --trial must be non-negative")
    summary = theory.verify(args.seed, trials, first)
    lines = [f"seed {args.seed}: {trials} trials, {len(summary.violations)} violations",
             f"max(lhs - rhs)             = {summary.max_lhs_minus_rhs:.3e}",
             f"max(rhs - corollary_rhs)   = {summary.max_rhs_minus_corollary:.3e}",
             f"max(tv - sqrt(kl / 2))     = {summary.max_pinsker_gap:.3e}"]
    for v in summary.violations:
        lines.append("violation " + json.dumps(theory.violation_json(v), sort_keys=True))
        lines.append(f"  replay: tmslab verify-theory --seed {args.seed} --trial {v.instance.trial}")
    _emit(args, summary.to_json(), lines)
    return EXIT_VIOLATION if summary.violations else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="print machine-readable JSON instead of a text summary")
    p = argparse.ArgumentParser(prog="tmslab", parents=[common],
                                description="Trajectory-mixed supervision lab on tabular n-gram policies.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run every configured method on every replicate seed")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="TMS once per axis value at a fixed step budget")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=pipeline.SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated axis values")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gen-data", parents=[common], help="write the generated datasets")
    g.add_argument("config")
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("verify-theory", parents=[common], help="randomised check of the drift bounds")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--trial", type=int, default=None, help="replay a single trial index")
    v.set_defaults(func=cmd_verify_theory)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if not hasattr(args, "json"):
        args.json = False
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"tmslab: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as err:
        print(f"tmslab: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except IncompleteBufferError as err:
        print(f"tmslab: incomplete trajectory buffer: {err}", file=sys.stderr)
        return EXIT_BUFFER


if __name__ == "__main__":
    sys.exit(main())
