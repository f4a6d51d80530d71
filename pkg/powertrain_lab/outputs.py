import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import plotly.express as px

from powertrain_lab.config import ExperimentConfig, config_hash
from powertrain_lab.errors import OutputError
from powertrain_lab.harness import LEARNING_CURVE_COLUMNS, TRACE_COLUMNS, EpisodeResult
from powertrain_lab.safety import SAFESET_COLUMNS, limiting_velocity_table

logger = logging.getLogger(__name__)


@dataclass
class RunOutputs:
    """Everything a CLI command may write; empty parts still produce valid files."""

    episodes: List[EpisodeResult] = field(default_factory=list)
    safeset: Optional[pd.DataFrame] = None
    learning_curve: Optional[pd.DataFrame] = None
    summary: Dict[str, Any] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)


# ============================================================
# 1. FILE WRITERS
# ============================================================

def _provenance(cfg: ExperimentConfig) -> str:
    return f"# config_hash={config_hash(cfg)} seed={cfg.seed}\n"


def write_csv(df: pd.DataFrame, path: str, cfg: ExperimentConfig) -> str:
    """CSV with a leading `# config_hash=... seed=...` comment line."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(_provenance(cfg))
            df.to_csv(f, index=False, lineterminator="\n")
    except OSError as e:
        raise OutputError(path, e) from e
    return path


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def metrics_document(cfg: ExperimentConfig, outputs: RunOutputs) -> Dict[str, Any]:
    return {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "episodes": [r.metrics.model_dump(mode="json") for r in outputs.episodes],
        "summary": outputs.summary,
        "checks": outputs.checks,
    }


def emit_outputs(outputs: RunOutputs, out_dir: str, cfg: ExperimentConfig) -> List[str]:
    """
    Write metrics.json, traces/trace_XXXX.csv, safeset.csv and
    learning_curve.csv under `out_dir`.

    Returns:
        Paths written, in write order.

    Raises:
        OutputError: the directory or a file could not be written.
    """
    trace_dir = os.path.join(out_dir, "traces")
    try:
        os.makedirs(trace_dir, exist_ok=True)
    except OSError as e:
        raise OutputError(trace_dir, e) from e

    written = []
    metrics_path = os.path.join(out_dir, "metrics.json")
    try:
        with open(metrics_path, "w", encoding="utf-8") as f:
            json.dump(metrics_document(cfg, outputs), f, sort_keys=True, indent=2)
            f.write("\n")
    except OSError as e:
        raise OutputError(metrics_path, e) from e
    written.append(metrics_path)

    for result in outputs.episodes:
        path = os.path.join(trace_dir, f"trace_{result.metrics.episode_index:04d}.csv")
        written.append(write_csv(result.trace, path, cfg))

    safeset = outputs.safeset if outputs.safeset is not None else pd.DataFrame(columns=SAFESET_COLUMNS)
    written.append(write_csv(safeset, os.path.join(out_dir, "safeset.csv"), cfg))

    curve = (
        outputs.learning_curve
        if outputs.learning_curve is not None
        else pd.DataFrame(columns=LEARNING_CURVE_COLUMNS)
    )
    written.append(write_csv(curve, os.path.join(out_dir, "learning_curve.csv"), cfg))

    logger.info("Wrote %d files to %s", len(written), out_dir)
    return written


def load_metrics(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ============================================================
# 2. FIGURES
# ============================================================

def write_figures(outputs: RunOutputs, out_dir: str, cfg: ExperimentConfig) -> List[str]:
    """Optional HTML figures: safe-set map, limiting relative velocity, learning curve."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    if outputs.safeset is not None and not outputs.safeset.empty:
        fig = px.scatter(
            outputs.safeset,
            x="z_m",
            y="v_h_m_s",
            color="min_lead_speed_m_s",
            symbol="region",
            title="Possible safe operating points",
        )
        written.append(_write_html(fig, os.path.join(out_dir, "safeset.html")))

        gaps = np.linspace(0.0, cfg.safeset.z_range_m[1] - cfg.safety.z0_m, 200)
        limits = limiting_velocity_table(cfg.safety, gaps).melt(
            id_vars="gap_m", var_name="region", value_name="limiting_rel_velocity_m_s"
        )
        fig = px.line(
            limits,
            x="gap_m",
            y="limiting_rel_velocity_m_s",
            color="region",
            title="Allowable relative velocity against gap",
        )
        written.append(_write_html(fig, os.path.join(out_dir, "relative_velocity.html")))

    if outputs.learning_curve is not None and not outputs.learning_curve.empty:
        fig = px.line(
            outputs.learning_curve,
            x="env_steps",
            y=["mean_reward", "r_accommodation", "r_fuel", "r_torque", "r_gear"],
            title="Training reward",
        )
        written.append(_write_html(fig, os.path.join(out_dir, "learning_curve.html")))

    return written


def _write_html(fig, path: str) -> str:
    try:
        fig.write_html(path, include_plotlyjs="cdn")
    except OSError as e:
        raise OutputError(path, e) from e
    return path
