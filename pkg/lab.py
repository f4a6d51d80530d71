"""
Command-line entry point.

    python lab.py simulate --config configs/default.json --episodes 10 --filter hocbf --controller baseline
    python lab.py train    --config configs/default.json
    python lab.py evaluate --config configs/default.json --checkpoint outputs/policy.pt
    python lab.py safeset  --config configs/default.json --plots

Exit code 0 when every enabled check passes, 2 when a check fails and 1 on error.
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

import pandas as pd
from pydantic import ValidationError

from powertrain_lab import settings
from powertrain_lab.config import ExperimentConfig, config_summary, load_config
from powertrain_lab.errors import LabError
from powertrain_lab.harness import (
    aggregate,
    compare_filters,
    evaluate,
    format_table,
    hocbf_less_conservative,
    run_checks,
    run_episodes,
    smoothed_improvement,
    train,
)
from powertrain_lab.outputs import RunOutputs, emit_outputs, write_figures
from powertrain_lab.safety import safe_set_grid

logger = logging.getLogger("lab")


# ============================================================
# 1. ARGUMENTS
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description="Powertrain safety-filter lab")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default from env)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="JSON experiment file")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--plots", action="store_true", help="also write plotly HTML figures")

    p = sub.add_parser("simulate", help="run episodes and write traces")
    common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--filter", choices=["hocbf", "ecbf", "none"], default=None)
    p.add_argument("--controller", choices=["rl", "baseline", "adversarial"], default=None)
    p.add_argument("--checkpoint", default=None, help="policy for --controller rl")

    p = sub.add_parser("train", help="train the RL policy behind the safety filter")
    common(p)

    p = sub.add_parser("evaluate", help="baseline vs RL on the held-out cycle")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--compare-filters", action="store_true", help="also run hocbf vs ecbf")

    p = sub.add_parser("safeset", help="export the possible-safe grid")
    common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    path = args.config or settings.find_default_config()
    cfg = load_config(path) if path else ExperimentConfig()
    if not path:
        logger.info("No config file found, using built-in defaults")
    return cfg.with_overrides(
        output_dir=args.output_dir or settings.output_dir_override(),
        workers=args.workers or settings.workers_override(),
        episodes=getattr(args, "episodes", None),
        filter=getattr(args, "filter", None),
        controller=getattr(args, "controller", None),
    )


# ============================================================
# 2. COMMANDS
# ============================================================

def _finish(cfg: ExperimentConfig, outputs: RunOutputs, plots: bool) -> int:
    emit_outputs(outputs, cfg.output_dir, cfg)
    if plots:
        write_figures(outputs, cfg.output_dir, cfg)
    failed = [name for name, ok in outputs.checks.items() if not ok]
    for name, ok in sorted(outputs.checks.items()):
        print(f"  check {name}: {'PASS' if ok else 'FAIL'}")
    return 2 if failed else 0


def cmd_simulate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    results = run_episodes(cfg, checkpoint=args.checkpoint)
    summary = {**config_summary(cfg), **aggregate(results)}
    print(format_table(_as_rows([summary])))
    return _finish(cfg, RunOutputs(episodes=results, summary=summary, checks=run_checks(cfg, results)), args.plots)


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    checkpoint = os.path.join(cfg.output_dir, cfg.training.checkpoint_name)
    result = train(cfg, checkpoint)
    summary = {
        **config_summary(cfg),
        "env_steps": int(result.learning_curve["env_steps"].max()) if not result.learning_curve.empty else 0,
        "episodes_completed": result.episodes_completed,
        "crashes": result.crashes,
        "aborted": result.aborted,
        "reward_improvement": smoothed_improvement(result.learning_curve),
        "checkpoint": checkpoint,
    }
    print(format_table(_as_rows([summary])))
    checks = {}
    if cfg.checks.no_crash:
        checks["no_crash"] = result.crashes == 0
    checks["training_completed"] = not result.aborted
    outputs = RunOutputs(learning_curve=result.learning_curve, summary=summary, checks=checks)
    return _finish(cfg, outputs, args.plots)


def cmd_evaluate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    report = evaluate(cfg, args.checkpoint)
    print(format_table(report.table))
    summary: Dict[str, object] = {
        **config_summary(cfg),
        "controllers": report.table.to_dict("records"),
    }
    episodes = report.results["rl"]
    checks = run_checks(cfg, report.results["baseline"] + episodes)
    if cfg.checks.efficiency_direction:
        checks["efficiency_direction"] = report.efficiency_direction()
    if args.compare_filters:
        comparison = compare_filters(cfg, args.checkpoint, cfg.evaluation.episodes)
        print(format_table(comparison))
        summary["filters"] = comparison.to_dict("records")
        checks["hocbf_less_conservative"] = hocbf_less_conservative(comparison)
    return _finish(cfg, RunOutputs(episodes=episodes, summary=summary, checks=checks), args.plots)


def cmd_safeset(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    grid = cfg.safeset
    df = safe_set_grid(cfg.safety, cfg.vehicle, grid.z_range_m, grid.v_h_range_m_s, grid.resolution)
    summary = {
        **config_summary(cfg),
        "cells": len(df),
        "possible_safe_fraction": float(df["possible_safe"].mean()) if len(df) else 0.0,
    }
    print(format_table(_as_rows([summary])))
    return _finish(cfg, RunOutputs(safeset=df, summary=summary), args.plots)


def _as_rows(rows: List[Dict]) -> pd.DataFrame:
    return pd.DataFrame(rows)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "safeset": cmd_safeset,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings.setup_logging(args.log_level)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (LabError, ValidationError) as e:
        print(f"Error in {args.command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
