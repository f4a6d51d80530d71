import hashlib
import json
import logging
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from powertrain_lab.controllers import FeatureScales, PolicyOptions, RewardWeights
from powertrain_lab.driver import (
    CycleKind,
    DriveCycle,
    IdmParams,
    RandomizationSpec,
    load_drive_cycle_csv,
    synthesize_cycle,
)
from powertrain_lab.dynamics import Integrator, VehicleParams, load_fuel_map_csv
from powertrain_lab.errors import ConfigError
from powertrain_lab.safety import FilterKind, SafetyConfig

logger = logging.getLogger(__name__)


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ============================================================
# 1. EXPERIMENT BLOCKS
# ============================================================

class ControllerKind(str, Enum):
    RL = "rl"
    BASELINE = "baseline"
    ADVERSARIAL = "adversarial"


class CycleSource(_Frozen):
    """A synthetic cycle, or a CSV file when kind is "csv"."""

    kind: str = "urban"
    duration_s: float = Field(600.0, gt=0.0)
    seed: int = 1
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check_kind(self) -> "CycleSource":
        if self.kind == "csv":
            if not self.path:
                raise ValueError("csv cycle source needs a path")
        else:
            CycleKind(self.kind)
        return self

    def build(self) -> DriveCycle:
        if self.kind == "csv":
            return load_drive_cycle_csv(self.path)
        return synthesize_cycle(CycleKind(self.kind), self.duration_s, self.seed)


class DynamicsOptions(_Frozen):
    integrator: Integrator = Integrator.EXPLICIT
    fuel_map_csv: Optional[str] = None
    # AMT torque interruption per realized shift; 0 disables it
    shift_time_s: float = Field(0.3, ge=0.0)


class TrainingOptions(_Frozen):
    total_steps: int = Field(200_000, gt=0)
    parallel_envs: int = Field(8, gt=0)
    rollout_length: int = Field(32, gt=0)
    steps_per_epoch: int = Field(5000, gt=0)
    checkpoint_name: str = "policy.pt"


class EvaluationOptions(_Frozen):
    episodes: int = Field(20, gt=0)


class MpoHyperparameters(_Frozen):
    """Recorded for a future HMPO trainer; the actor-critic trainer ignores them."""

    dual_constraint: float = 0.1
    retrace_steps: int = 1
    epsilon_mean: float = 0.1
    epsilon_std: float = 0.001
    epsilon_discrete: float = 0.1
    alpha_discrete: float = 10.0
    alpha_continuous: float = 10.0
    actor_lr: float = 1e-4
    critic_lr: float = 1e-5


class ChecksConfig(_Frozen):
    """Invariant checks whose failure turns the exit code to 2."""

    no_crash: bool = True
    fuel_conservation: bool = True
    filter_feasible: bool = False
    efficiency_direction: bool = True


class SafeSetGridSpec(_Frozen):
    z_range_m: Tuple[float, float] = (2.0, 102.0)
    v_h_range_m_s: Tuple[float, float] = (0.0, 40.0)
    resolution: int = Field(100, gt=0)


class ExperimentConfig(_Frozen):
    seed: int = 0
    vehicle: VehicleParams = VehicleParams()
    safety: SafetyConfig = SafetyConfig()
    filter: FilterKind = FilterKind.HOCBF
    controller: ControllerKind = ControllerKind.BASELINE
    cycle: CycleSource = CycleSource()
    eval_cycle: CycleSource = CycleSource(seed=101)
    randomization: RandomizationSpec = RandomizationSpec()
    idm: IdmParams = IdmParams()
    dynamics: DynamicsOptions = DynamicsOptions()
    dt_s: float = Field(0.1, gt=0.0)
    episode_length_s: float = Field(600.0, gt=0.0)
    episodes: int = Field(10, ge=0)
    workers: int = Field(1, gt=0)
    reward: RewardWeights = RewardWeights()
    features: FeatureScales = FeatureScales()
    policy: PolicyOptions = PolicyOptions()
    training: TrainingOptions = TrainingOptions()
    evaluation: EvaluationOptions = EvaluationOptions()
    mpo: MpoHyperparameters = MpoHyperparameters()
    checks: ChecksConfig = ChecksConfig()
    safeset: SafeSetGridSpec = SafeSetGridSpec()
    output_dir: str = "outputs"

    def with_overrides(self, **updates: Any) -> "ExperimentConfig":
        """Copy with validated top-level overrides (None values are skipped)."""
        data = self.model_dump()
        data.update({k: v for k, v in updates.items() if v is not None})
        return ExperimentConfig.model_validate(data)

    def resolved_vehicle(self) -> VehicleParams:
        """Vehicle with the configured fuel map CSV swapped in, if any."""
        if not self.dynamics.fuel_map_csv:
            return self.vehicle
        fuel = load_fuel_map_csv(self.dynamics.fuel_map_csv, self.vehicle.fuel_model.idle_rate_g_s)
        return self.vehicle.model_copy(update={"fuel_model": fuel})


# ============================================================
# 2. LOADING AND HASHING
# ============================================================

def load_config(path: str) -> ExperimentConfig:
    """
    Read and validate a JSON experiment file. Unknown keys are rejected.

    Raises:
        ConfigError: unreadable file, malformed JSON or failed validation.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"could not read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e

    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e
    logger.info("Loaded config %s (hash %s)", path, config_hash(cfg)[:12])
    return cfg


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical serialization; changes iff a field changes."""
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def config_summary(cfg: ExperimentConfig) -> Dict[str, Any]:
    return {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "filter": cfg.filter.value,
        "controller": cfg.controller.value,
        "episodes": cfg.episodes,
    }
