"""Command-line entry point: feastable, synth, simulate and sweep.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 unrealizable (or a strategy that fails verification), 5 artifact mismatch,
6 invalid scenario flags. Diagnostics go to stderr, data to files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import replace
from importlib import metadata

from .config import PUSHES_ALL, ConfigError, StackConfig, load_config
from .simulator import (
    ConfigMismatch, PerturbationEvent, SweepContext, check_consistency, direction_grid, run_episode,
    sweep_envelope, sweep_success_rate, trace_to_jsonl,
)
from .synthesis import (
    EmptyActionSet, Strategy, Unrealizable, admissible_pushes, all_pushes, build_game, synthesize,
    verify_strategy,
)
from .traj_opt.table import (
    TableTampered, _atomic_write, build_feasibility_table, metadata_path, read_table, write_table,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_UNREALIZABLE, EXIT_MISMATCH, EXIT_SCENARIO = 0, 2, 3, 4, 5, 6
JOBS_ENV = "PUSHREC_JOBS"
FRONT_RIGHT = -45.0


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(out: str, command: str, cfg: StackConfig, inputs: list[str], outputs: list[str],
                   started: float, result: dict | None = None) -> str:
    doc = {
        "command": command,
        "config_hash": cfg.config_hash,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": {p: _sha256(p) for p in outputs},
        "tool_version": _version(),
        "wall_time_s": round(time.time() - started, 3),
    }
    if result is not None:
        doc["result"] = result
    path = out + ".manifest.json"
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _load_cfg(path: str | None) -> StackConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from exc


def _load_table(path: str, cfg: StackConfig):
    try:
        table, meta = read_table(path, cfg.pipm, cfg.model)
    except TableTampered as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read table: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_MISMATCH, f"malformed table: {exc}") from exc
    if meta.get("config_hash") != cfg.table_hash:
        raise CliError(EXIT_MISMATCH, "table was built under a different configuration")
    return table, meta


def _load_strategy(path: str, cfg: StackConfig, meta: dict) -> Strategy:
    try:
        with open(path, encoding="utf-8") as fh:
            strategy, doc = Strategy.from_json(fh.read())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read strategy: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_MISMATCH, f"malformed strategy: {exc}") from exc
    try:
        check_consistency(doc, meta, cfg.strategy_hash)
    except ConfigMismatch as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from exc
    return strategy


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_feastable(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _load_cfg(args.config)
    table = build_feasibility_table(cfg.model, cfg.pipm, jobs=args.jobs, options=cfg.solver)
    try:
        meta = write_table(table, args.out, cfg.table_hash, cfg.solver)
        write_manifest(args.out, "feastable", cfg, [args.config] if args.config else [],
                       [args.out, metadata_path(args.out)], started,
                       {k: meta[k] for k in ("rows", "crossed_rows", "wide_rows", "feasible_rows")})
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write table: {exc}") from exc
    print(f"{meta['rows']} rows ({meta['crossed_rows']} crossed), {meta['feasible_rows']} feasible",
          file=sys.stderr)
    return EXIT_OK


def synthesize_strategy(cfg: StackConfig, table):
    """Game, strategy and verification report for a configuration; raises Unrealizable."""
    opts = cfg.synthesis.options()
    if cfg.synthesis.pushes == PUSHES_ALL:
        pushes = all_pushes()
    else:
        pushes = admissible_pushes(cfg.pipm, table, opts)
        if not pushes:
            raise Unrealizable([])
    game = build_game(cfg.pipm, table, replace(opts, pushes=tuple(pushes)))
    strategy = synthesize(game)
    return game, strategy, verify_strategy(strategy, game)


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _load_cfg(args.config)
    table, meta = _load_table(args.table, cfg)
    try:
        game, strategy, report = synthesize_strategy(cfg, table)
    except (Unrealizable, EmptyActionSet) as exc:
        trace = getattr(exc, "trace", [])
        print("unrealizable; environment counter-play:", file=sys.stderr)
        for entry in trace:
            print(f"  {entry}", file=sys.stderr)
        return EXIT_UNREALIZABLE
    report_path = args.out + ".report.json"
    report_doc = {
        "clean": report.clean,
        "states": len(game.states),
        "winning": len(strategy.winning),
        "pushes": len(strategy.pushes),
        "states_checked": report.states_checked,
        "nodes_checked": report.nodes_checked,
        "violations": [str(v) for v in report.violations],
    }
    try:
        _atomic_write(args.out, strategy.to_json(cfg.strategy_hash, meta["csv_sha256"]))
        _atomic_write(report_path, json.dumps(report_doc, indent=2, sort_keys=True) + "\n")
        write_manifest(args.out, "synth", cfg, ([args.config] if args.config else []) + [args.table],
                       [args.out, report_path], started, {"clean": report.clean})
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write strategy: {exc}") from exc
    print(f"realizable: {len(strategy.winning)} winning states, {len(strategy.pushes)} admissible pushes, "
          f"{len(report.violations)} violations", file=sys.stderr)
    return EXIT_OK if report.clean else EXIT_UNREALIZABLE


def _scenario_events(args: argparse.Namespace, cfg: StackConfig) -> list[PerturbationEvent]:
    polar = args.push_direction is not None or args.push_magnitude is not None
    cart = args.push_vx is not None or args.push_vy is not None
    if polar and cart:
        raise CliError(EXIT_SCENARIO, "give the push either as --push-vx/--push-vy or as direction/magnitude")
    if not polar and not cart:
        return []
    if cart:
        vx, vy = args.push_vx or 0.0, args.push_vy or 0.0
        magnitude, direction = math.hypot(vx, vy), math.degrees(math.atan2(vy, vx))
    else:
        if args.push_direction is None or args.push_magnitude is None:
            raise CliError(EXIT_SCENARIO, "--push-direction and --push-magnitude go together")
        direction, magnitude = args.push_direction, args.push_magnitude
    try:
        return [PerturbationEvent(args.push_phase, direction, magnitude, args.push_step)]
    except ValueError as exc:
        raise CliError(EXIT_SCENARIO, f"invalid push: {exc}") from exc


def cmd_simulate(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _load_cfg(args.config)
    events = _scenario_events(args, cfg)
    table, meta = _load_table(args.table, cfg)
    strategy = _load_strategy(args.strategy, cfg, meta)
    sim = cfg.sim_config()
    if args.steps is not None:
        if args.steps < 1:
            raise CliError(EXIT_SCENARIO, "--steps must be positive")
        sim = replace(sim, max_steps=args.steps)
    result = run_episode(sim, events, strategy, table, cfg.pipm, record=True)
    summary = {
        "outcome": result.outcome,
        "cause": result.cause,
        "steps_to_recovery": result.steps_to_recovery,
        "recalculations": result.recalculations,
        "keyframes": [k.key() for k in result.keyframes],
        "plans": [[[a.key(), b.key()] for a, b in plan] for plan in result.plans],
    }
    try:
        _atomic_write(args.out, trace_to_jsonl(result.trace, summary))
        write_manifest(args.out, "simulate", cfg,
                       ([args.config] if args.config else []) + [args.table, args.strategy],
                       [args.out], started, summary)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write trace: {exc}") from exc
    print(f"{result.outcome}" + (f" ({result.cause})" if result.cause else ""), file=sys.stderr)
    return EXIT_OK


def _float_list(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(EXIT_SCENARIO, f"bad {what}: {text!r}") from exc


def _directions(args: argparse.Namespace, default: list[float]) -> list[float]:
    if args.directions is not None and args.direction_count is not None:
        raise CliError(EXIT_SCENARIO, "give either --directions or --direction-count")
    if args.direction_count is not None:
        if args.direction_count < 1:
            raise CliError(EXIT_SCENARIO, "--direction-count must be positive")
        return direction_grid(args.direction_count)
    if args.directions is None:
        return default
    vals = _float_list(args.directions, "directions")
    if not vals:
        raise CliError(EXIT_SCENARIO, "no directions given")
    return vals


def _phases(args: argparse.Namespace, default_step: float | None, default: list[float]) -> list[float]:
    if args.phases is not None and args.phase_step is not None:
        raise CliError(EXIT_SCENARIO, "give either --phases or --phase-step")
    if args.phases is not None:
        phases = [p / 100.0 for p in _float_list(args.phases, "phases")]
    else:
        step = args.phase_step if args.phase_step is not None else default_step
        if step is None:
            return default
        if not 0 < step <= 1:
            raise CliError(EXIT_SCENARIO, "--phase-step must lie in (0, 1]")
        n = int(round(1.0 / step))
        if abs(n * step - 1.0) > 1e-9:
            raise CliError(EXIT_SCENARIO, "--phase-step must divide 1")
        phases = [i / n for i in range(n)]
    if not phases or any(not 0.0 <= p < 1.0 for p in phases):
        raise CliError(EXIT_SCENARIO, "phases must lie in [0, 100) percent")
    return phases


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = _load_cfg(args.config)
    if args.mode == "rate":
        directions = _directions(args, [FRONT_RIGHT])
        magnitudes = _float_list(args.magnitudes or "0.1,0.2,0.3", "magnitudes")
        if not magnitudes or any(m < 0 for m in magnitudes):
            raise CliError(EXIT_SCENARIO, "magnitudes must be non-negative")
        phases = _phases(args, 0.01, [])
    else:
        if args.magnitudes is not None:
            raise CliError(EXIT_SCENARIO, "--magnitudes only applies to --mode rate")
        directions = _directions(args, direction_grid(12))
        phases = _phases(args, None, [0.0, 0.3, 0.6, 0.9])
    push_step = cfg.sim.push_step if args.push_step is None else args.push_step
    if push_step < 1:
        raise CliError(EXIT_SCENARIO, "--push-step must be at least 1")
    table, meta = _load_table(args.table, cfg)
    strategy = _load_strategy(args.strategy, cfg, meta)
    ctx = SweepContext(cfg.sim_config(), strategy, table, cfg.pipm, push_step)
    if args.mode == "rate":
        grid = sweep_success_rate(ctx, directions, magnitudes, phases, jobs=args.jobs)
        result = {"cells": len(grid.values), "monotonicity_violations": len(grid.monotonicity_violations())}
    else:
        grid = sweep_envelope(ctx, directions, phases, jobs=args.jobs)
        result = {"cells": len(grid.values), "cells_with_pockets": len(grid.pockets)}
    try:
        _atomic_write(args.out, grid.to_csv())
        write_manifest(args.out, f"sweep --mode {args.mode}", cfg,
                       ([args.config] if args.config else []) + [args.table, args.strategy],
                       [args.out], started, result)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write grid: {exc}") from exc
    print(f"{result['cells']} cells written to {args.out}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pushrec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, artifacts: bool) -> None:
        sp.add_argument("--config", help="stack configuration file (defaults when omitted)")
        if artifacts:
            sp.add_argument("--table", required=True, help="feasibility table CSV")
            sp.add_argument("--strategy", required=True, help="strategy JSON")

    sp = sub.add_parser("feastable", help="build the feasibility table")
    common(sp, False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=_default_jobs(), help=f"worker processes (env {JOBS_ENV})")
    sp.set_defaults(func=cmd_feastable)

    sp = sub.add_parser("synth", help="synthesize and verify the keyframe strategy")
    common(sp, False)
    sp.add_argument("--table", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("simulate", help="run one episode and write its trace")
    common(sp, True)
    sp.add_argument("--out", required=True, help="trace (JSON lines)")
    sp.add_argument("--push-phase", type=float, default=0.0, help="OWS phase in [0, 1)")
    sp.add_argument("--push-vx", type=float)
    sp.add_argument("--push-vy", type=float)
    sp.add_argument("--push-direction", type=float, help="degrees, 0 = forward, 90 = left")
    sp.add_argument("--push-magnitude", type=float, help="m/s")
    sp.add_argument("--push-step", type=int, default=1,
                    help="OWS index of the push; odd steps are left stance (default 1)")
    sp.add_argument("--steps", type=int, help="episode length in steps")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="success-rate or envelope grid")
    common(sp, True)
    sp.add_argument("--out", required=True, help="grid CSV")
    sp.add_argument("--mode", choices=("rate", "envelope"), required=True)
    sp.add_argument("--directions", help="comma list of push directions in degrees (0 = forward, 90 = left)")
    sp.add_argument("--direction-count", type=int, help="evenly spaced directions starting at 15 degrees")
    sp.add_argument("--magnitudes", help="comma list in m/s (rate mode)")
    sp.add_argument("--phases", help="comma list in percent")
    sp.add_argument("--phase-step", type=float, help="phase spacing as a fraction, e.g. 0.01")
    sp.add_argument("--push-step", type=int)
    sp.add_argument("--jobs", type=int, default=_default_jobs(), help=f"worker processes (env {JOBS_ENV})")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("--jobs must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
