"""Command-line interface: run, sweep, replay and report."""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from specmoe import __version__
from specmoe.cost_model import ConfigError, draft_preset, model_preset
from specmoe.engine import (
    MissingBaselinePolicy,
    ScenarioReport,
    compare_policies,
    load_scenario,
    parse_policies,
    read_cells,
    regression,
    replay_report,
    run_scenario,
    worst_case,
    write_report,
)
from specmoe.kernels import BACKEND
from specmoe.workload import AcceptanceTrace, TraceError

DESCRIPTION = """\
NAME
    specmoe - simulate speculative decoding on mixture-of-experts models

SYNOPSIS
    specmoe run SCENARIO [--out DIR] [--seed N] [--jobs N] [--telemetry]
    specmoe sweep SCENARIO [--policies LIST] [--models LIST] [--tasks LIST]
                  [--tokens N] [--seed N] [--out DIR] [--jobs N] [--telemetry]
    specmoe replay TRACE [--policy LIST] [--model NAME] [--draft NAME]
                  [--affinity A] [--seed N] [--out DIR] [--telemetry]
    specmoe report DIR [--format table|csv|json]

DESCRIPTION
    run      Execute every (model, task, policy, seed) cell of a scenario file
             and write DIR/cells.csv and DIR/summary.json.
    sweep    Like run, with flags overriding the scenario's grid. Flags take
             precedence over file fields, which take precedence over defaults.
    replay   Drive the simulator from a recorded acceptance trace
             (request_id,iter,k_offered,accepted per line) instead of a
             synthetic workload.
    report   Print a policy comparison from a previous run directory.

POLICIES
    none, static:K, static:A..B (inclusive range), adaptive,
    adaptive:nobackoff. Separate several with commas. A `none` baseline is
    always simulated so speedups are defined.

SCENARIO FILES
    TOML. Keys: name, models (preset names), [model.NAME] inline configs
    (optionally `base = "preset"`), tasks, policies, seed or seeds, draft,
    tokens or requests, [controller] overrides, [task_files] NAME = path.

SEEDS
    --seed overrides the file; without either, a seed is drawn from entropy
    and recorded in summary.json under metadata.

EXIT STATUS
    0 success, 1 configuration or trace error, 2 usage error, 3 I/O error,
    4 some cells failed (results for the rest are still written).
"""


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specmoe",
        description=DESCRIPTION,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p):
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="random seed; overrides the scenario file")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
        p.add_argument("--telemetry", action="store_true",
                       help="also write per-iteration telemetry and controller decisions as JSONL")

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("scenario", help="scenario file (TOML)")
    common(p_run)

    p_sweep = sub.add_parser("sweep", help="run a scenario with grid overrides")
    p_sweep.add_argument("scenario", help="scenario file (TOML)")
    p_sweep.add_argument("--policies", type=_csv_list, help="comma-separated policy list")
    p_sweep.add_argument("--models", type=_csv_list, help="comma-separated model presets")
    p_sweep.add_argument("--tasks", type=_csv_list, help="comma-separated task fixtures")
    p_sweep.add_argument("--tokens", type=int, help="token budget per cell")
    common(p_sweep)

    p_replay = sub.add_parser("replay", help="replay a recorded acceptance trace")
    p_replay.add_argument("trace", help="trace file")
    p_replay.add_argument("--policy", type=_csv_list, default=["adaptive"],
                          help="policy or comma-separated policies (default: adaptive)")
    p_replay.add_argument("--model", default="mixtral", help="model preset (default: mixtral)")
    p_replay.add_argument("--draft", default="ngram", help="drafter preset (default: ngram)")
    p_replay.add_argument("--affinity", type=float, help="task expert affinity for routing")
    common(p_replay)

    p_report = sub.add_parser("report", help="summarize a previous run directory")
    p_report.add_argument("in_dir", help="directory holding cells.csv")
    p_report.add_argument("--format", choices=("table", "csv", "json"), default="table")
    return parser


def _fail(code: int, msg: str) -> int:
    print(f"specmoe: error: {msg}", file=sys.stderr)
    return code


def _finish(report: ScenarioReport, out: str, seed_source: str | None = None) -> int:
    meta = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), "backend": BACKEND,
            "version": __version__}
    if seed_source:
        meta["seed_source"] = seed_source
    cells, summary = write_report(report, out, meta)
    print(f"wrote {cells} ({len(report.cells)} cells) and {summary}")
    if report.regression.get("r2") is not None:
        print(f"utility vs speedup: slope={report.regression['slope']:.4f} R2={report.regression['r2']:.5f}")
    for pol, wc in report.worst_case.items():
        print(f"{pol:>20}: worst speedup {wc['speedup']:.3f} ({wc['model']}/{wc['task']})")
    if report.failures:
        for f in report.failures:
            print(f"cell failed: {f['model']}/{f['task']}/{f['policy']}: {f['error']}", file=sys.stderr)
        return 4
    return 0


def _cmd_run(args, overrides: bool) -> int:
    cfg = load_scenario(args.scenario)
    seed_source = cfg.seed_source
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,), seed_source="flag")
        seed_source = "flag"
    if overrides:
        if args.policies:
            cfg = replace(cfg, policies=tuple(parse_policies(args.policies, cfg.controller)))
        if args.models:
            cfg = replace(cfg, models=tuple(model_preset(m) for m in args.models))
        if args.tasks:
            cfg = replace(cfg, tasks=tuple(args.tasks))
        if args.tokens is not None:
            cfg = replace(cfg, tokens=args.tokens, requests=None)
    tdir = Path(args.out) / "telemetry" if args.telemetry else None
    report = run_scenario(cfg, jobs=max(1, args.jobs), telemetry_dir=tdir)
    return _finish(report, args.out, seed_source)


def _cmd_replay(args) -> int:
    trace = AcceptanceTrace.load(args.trace)
    policies = parse_policies(args.policy)
    seed = args.seed if args.seed is not None else 0
    tdir = Path(args.out) / "telemetry" if args.telemetry else None
    report = replay_report(trace, policies, model_preset(args.model), draft_preset(args.draft), seed,
                           name=Path(args.trace).stem, affinity=args.affinity, telemetry_dir=tdir)
    return _finish(report, args.out, "flag" if args.seed is not None else "default")


def _cmd_report(args) -> int:
    path = Path(args.in_dir) / "cells.csv"
    cells = read_cells(path)
    rep = ScenarioReport(Path(args.in_dir).name, cells, [], {}, [], {})
    rows = compare_policies(rep)
    pairs = [(c["utility"], c["speedup"]) for c in cells if c["policy"] != "none"]
    reg = regression([u for u, _ in pairs], [s for _, s in pairs])
    if args.format == "json":
        print(json.dumps({"cells": rows, "worst_case": worst_case(rows), "regression": reg},
                         indent=2, sort_keys=True))
    elif args.format == "csv":
        print("model,task,policy,seed,speedup,utility")
        for r, c in zip(rows, cells):
            print(f"{r['model']},{r['task']},{r['policy']},{r['seed']},{r['speedup']!r},{c['utility']!r}")
    else:
        print(f"{'model':<10} {'task':<14} {'policy':<20} {'seed':>6} {'speedup':>8} {'utility':>8}")
        for r, c in zip(rows, cells):
            print(f"{r['model']:<10} {r['task']:<14} {r['policy']:<20} {r['seed']:>6} "
                  f"{r['speedup']:>8.3f} {c['utility']:>8.3f}")
        if reg["r2"] is not None:
            print(f"\nutility vs speedup: slope={reg['slope']:.4f} R2={reg['r2']:.5f} (n={reg['n']})")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return _cmd_run(args, overrides=False)
        if args.command == "sweep":
            return _cmd_run(args, overrides=True)
        if args.command == "replay":
            return _cmd_replay(args)
        return _cmd_report(args)
    except (TraceError, ConfigError) as exc:
        return _fail(1, f"{exc}")
    except MissingBaselinePolicy as exc:
        return _fail(1, f"{exc}; include the 'none' policy")
    except KeyError as exc:
        return _fail(1, f"missing data: {exc}")
    except FileNotFoundError as exc:
        return _fail(3, f"cannot read {exc.filename}: no such file")
    except OSError as exc:
        return _fail(3, f"{exc.filename or ''}: {exc.strerror or exc}")


if __name__ == "__main__":
    sys.exit(main())
