import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from powertrain_lab.dynamics import SimState, VehicleParams, initial_gear
from powertrain_lab.errors import ConfigError, InitSamplingExhausted, OutOfRange
from powertrain_lab.safety import FilterKind, SafetyConfig, is_initially_safe

logger = logging.getLogger(__name__)

IDM_ACCEL_LIMITS = (-4.0, 3.0)
IDM_MIN_GAP_FLOOR_M = 0.1
MAX_INIT_ATTEMPTS = 1000
CYCLE_COLUMNS = ["time_s", "speed_m_s"]


# ============================================================
# 1. DRIVE CYCLES
# ============================================================

@dataclass(frozen=True, eq=False)
class DriveCycle:
    """Lead-vehicle speed profile, piecewise linear between samples."""

    times_s: np.ndarray
    speeds_m_s: np.ndarray
    name: str = "cycle"

    def __post_init__(self):
        times = np.array(self.times_s, dtype=float)
        speeds = np.array(self.speeds_m_s, dtype=float)
        if times.ndim != 1 or times.shape != speeds.shape or len(times) < 2:
            raise ValueError("a drive cycle needs at least two (time, speed) samples")
        if times[0] != 0.0:
            raise ValueError("drive cycle time must start at 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("drive cycle time must be strictly increasing")
        if not np.all(np.isfinite(speeds)) or np.any(speeds < 0):
            raise ValueError("drive cycle speeds must be finite and non-negative")
        times.setflags(write=False)
        speeds.setflags(write=False)
        object.__setattr__(self, "times_s", times)
        object.__setattr__(self, "speeds_m_s", speeds)

    @property
    def duration_s(self) -> float:
        return float(self.times_s[-1])

    def speed_at(self, time_s: float) -> float:
        return float(np.interp(time_s, self.times_s, self.speeds_m_s))

    def equals(self, other: "DriveCycle") -> bool:
        return (
            self.name == other.name
            and np.array_equal(self.times_s, other.times_s)
            and np.array_equal(self.speeds_m_s, other.speeds_m_s)
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"time_s": self.times_s, "speed_m_s": self.speeds_m_s})


def lead_state_at(cycle: DriveCycle, time_s: float, forward_dt_s: Optional[float] = None) -> Tuple[float, float]:
    """
    Lead speed and acceleration at `time_s`.

    Acceleration is the segment slope; at a sample point it is the mean of
    the two adjacent slopes (one-sided at either end). With `forward_dt_s`
    it is the forward difference over the next step instead, clipped to the
    cycle end, so integrating it at that step size replays the cycle.

    Example:
        samples (0, 0), (10, 20) at t=5 -> (10.0, 2.0)
    """
    t = cycle.times_s
    if time_s < 0.0 or time_s > cycle.duration_s + 1e-9:
        raise OutOfRange(f"t={time_s:.3f}s outside cycle '{cycle.name}' [0, {cycle.duration_s}]")
    time_s = min(time_s, cycle.duration_s)

    speed = cycle.speed_at(time_s)
    if forward_dt_s is not None:
        if forward_dt_s <= 0:
            raise ValueError(f"forward step must be positive, got {forward_dt_s}")
        t_next = min(time_s + forward_dt_s, cycle.duration_s)
        return speed, (cycle.speed_at(t_next) - speed) / forward_dt_s
    slopes = np.diff(cycle.speeds_m_s) / np.diff(t)
    idx = int(np.searchsorted(t, time_s, side="right")) - 1
    idx = min(max(idx, 0), len(slopes))

    on_sample = math.isclose(time_s, t[idx], rel_tol=0.0, abs_tol=1e-9)
    if on_sample:
        left = slopes[idx - 1] if idx > 0 else None
        right = slopes[idx] if idx < len(slopes) else None
        if left is None:
            return speed, float(right)
        if right is None:
            return speed, float(left)
        return speed, float(0.5 * (left + right))
    return speed, float(slopes[min(idx, len(slopes) - 1)])


class CycleKind(str, Enum):
    URBAN = "urban"
    HIGHWAY = "highway"
    SAWTOOTH = "sawtooth"


def _sample_times(duration_s: float) -> np.ndarray:
    times = np.arange(0.0, math.floor(duration_s) + 1.0)
    if times[-1] < duration_s:
        times = np.append(times, duration_s)
    return times


def _urban_breakpoints(duration_s: float, rng: np.random.Generator) -> List[Tuple[float, float]]:
    # Repeated micro-trips: idle, accelerate, cruise, brake to rest.
    points = [(0.0, 0.0)]
    t = 0.0
    while t < duration_s:
        t += rng.uniform(5.0, 15.0)
        points.append((t, 0.0))
        cruise = rng.uniform(8.0, 22.0)
        t += cruise / rng.uniform(0.8, 1.5)
        points.append((t, cruise))
        t += rng.uniform(10.0, 40.0)
        points.append((t, cruise))
        t += cruise / rng.uniform(1.0, 1.8)
        points.append((t, 0.0))
    return points


def _highway_breakpoints(duration_s: float, rng: np.random.Generator) -> List[Tuple[float, float]]:
    target = rng.uniform(25.0, 33.0)
    points = [(0.0, 0.0), (target / 1.0, target)]
    t, v = points[-1]
    while t < duration_s:
        t += rng.uniform(30.0, 90.0)
        points.append((t, v))
        new_v = rng.uniform(22.0, 35.0)
        t += abs(new_v - v) / 0.5
        v = new_v
        points.append((t, v))
    return points


def synthesize_cycle(kind: CycleKind, duration_s: float, seed: int = 0) -> DriveCycle:
    """
    Deterministic synthetic lead profile sampled at 1 Hz.

    urban: micro-trips with stops, <= 25 m/s. highway: cruise changes,
    <= 35 m/s. sawtooth: 0 -> 15 -> 0 m/s ramps with a 30 s period.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    kind = CycleKind(kind)
    times = _sample_times(duration_s)

    if kind == CycleKind.SAWTOOTH:
        phase = np.mod(times, 30.0)
        speeds = 15.0 * (1.0 - np.abs(phase - 15.0) / 15.0)
    else:
        rng = np.random.default_rng(seed)
        if kind == CycleKind.URBAN:
            points = _urban_breakpoints(duration_s, rng)
        else:
            points = _highway_breakpoints(duration_s, rng)
        bp_t, bp_v = zip(*points)
        speeds = np.interp(times, bp_t, bp_v)

    return DriveCycle(times, np.maximum(speeds, 0.0), name=f"{kind.value}-{seed}")


def count_stops(cycle: DriveCycle, threshold_m_s: float = 0.1) -> int:
    """Number of times the lead comes to rest after moving."""
    stopped = cycle.speeds_m_s <= threshold_m_s
    return int(np.sum(stopped[1:] & ~stopped[:-1]))


def load_drive_cycle_csv(path: str, name: Optional[str] = None) -> DriveCycle:
    try:
        df = pd.read_csv(path, encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ConfigError(f"could not read drive cycle {path}: {e}") from e

    missing = [c for c in CYCLE_COLUMNS if c not in df.columns]
    if missing:
        raise ConfigError(f"drive cycle {path} is missing columns {missing}")
    try:
        return DriveCycle(
            df["time_s"].to_numpy(dtype=float),
            df["speed_m_s"].to_numpy(dtype=float),
            name=name or path,
        )
    except ValueError as e:
        raise ConfigError(f"invalid drive cycle {path}: {e}") from e


# ============================================================
# 2. INTELLIGENT DRIVER MODEL
# ============================================================

class IdmParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    desired_speed_m_s: float = Field(30.0, gt=0.0)
    time_headway_s: float = Field(1.5, gt=0.0)
    min_gap_m: float = Field(2.0, gt=0.0)
    max_accel_m_s2: float = Field(1.5, gt=0.0)
    comfort_decel_m_s2: float = Field(2.0, gt=0.0)
    accel_exponent: float = Field(4.0, gt=0.0)


def idm_acceleration(state: SimState, params: IdmParams, lead_present: bool = True) -> float:
    """
    Desired acceleration of the human driver.

        a = a_max [1 - (v/v0)^delta - (s*/z)^2]
        s* = s0 + max(0, v T + v (v - v_l) / (2 sqrt(a_max b)))

    The gap term is dropped when no lead is present; the result is clamped
    to [-4, 3] m/s^2.
    """
    v = state.host_speed_m_s
    free = 1.0 - (v / params.desired_speed_m_s) ** params.accel_exponent
    if lead_present:
        dv = v - state.lead_speed_m_s
        s_star = params.min_gap_m + max(
            0.0,
            v * params.time_headway_s
            + v * dv / (2.0 * math.sqrt(params.max_accel_m_s2 * params.comfort_decel_m_s2)),
        )
        z = max(state.separation_m, IDM_MIN_GAP_FLOOR_M)
        free -= (s_star / z) ** 2
    accel = params.max_accel_m_s2 * free
    return min(max(accel, IDM_ACCEL_LIMITS[0]), IDM_ACCEL_LIMITS[1])


# ============================================================
# 3. EPISODE RANDOMIZATION
# ============================================================

class RandomizationSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    speed_noise_std_m_s: float = Field(0.5, ge=0.0)
    noise_smoothing_s: float = Field(5.0, gt=0.0)
    initial_gap_range_m: Tuple[float, float] = (20.0, 80.0)
    initial_host_speed_range_m_s: Tuple[float, float] = (0.0, 15.0)
    grade_range_rad: Tuple[float, float] = (-0.02, 0.02)
    mass_range_kg: Tuple[float, float] = (5000.0, 12000.0)
    idm_jitter_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    brake_events_per_episode: int = Field(0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _ranges_ordered(self) -> "RandomizationSpec":
        for name in (
            "initial_gap_range_m",
            "initial_host_speed_range_m_s",
            "grade_range_rad",
            "mass_range_kg",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be (low, high), got {(lo, hi)}")
        if self.initial_gap_range_m[0] < 0 or self.initial_host_speed_range_m_s[0] < 0:
            raise ValueError("initial gap and host speed ranges must be non-negative")
        if self.mass_range_kg[0] <= 0:
            raise ValueError("mass range must be positive")
        return self


class EpisodeSetup(NamedTuple):
    cycle: DriveCycle
    initial_state: SimState
    vehicle_overrides: Dict[str, float]
    idm: IdmParams


def limit_deceleration(cycle: DriveCycle, a_max_m_s2: float) -> DriveCycle:
    """Raise samples so the lead never brakes harder than a_max between samples."""
    speeds = np.array(cycle.speeds_m_s)
    dts = np.diff(cycle.times_s)
    for i in range(1, len(speeds)):
        speeds[i] = max(speeds[i], speeds[i - 1] - a_max_m_s2 * dts[i - 1])
    return DriveCycle(cycle.times_s, speeds, name=cycle.name)


def perturb_cycle(
    cycle: DriveCycle,
    noise_std_m_s: float,
    smoothing_s: float,
    a_lead_max_m_s2: float,
    rng: np.random.Generator,
) -> DriveCycle:
    """Add low-pass filtered noise to the speed profile, floored at 0 and decel-limited."""
    if noise_std_m_s <= 0.0:
        return cycle
    dt = float(np.median(np.diff(cycle.times_s)))
    window = max(1, int(round(smoothing_s / dt)))
    noise = rng.normal(0.0, noise_std_m_s, size=len(cycle.times_s))
    smooth = np.convolve(noise, np.ones(window) / window, mode="same") * math.sqrt(window)
    speeds = np.maximum(cycle.speeds_m_s + smooth, 0.0)
    return limit_deceleration(DriveCycle(cycle.times_s, speeds, name=cycle.name), a_lead_max_m_s2)


def inject_brake_events(
    cycle: DriveCycle,
    n_events: int,
    a_lead_max_m_s2: float,
    rng: np.random.Generator,
    hold_s: float = 2.0,
    recovery_accel_m_s2: float = 1.0,
) -> DriveCycle:
    """
    Worst-case lead braking: from a random start the lead brakes at exactly
    a_lead_max to rest, holds, then recovers at 1 m/s^2 until it rejoins
    the base profile.
    """
    if n_events <= 0:
        return cycle
    t = cycle.times_s
    speeds = np.array(cycle.speeds_m_s)
    starts = np.sort(rng.uniform(0.1 * cycle.duration_s, 0.8 * cycle.duration_s, size=n_events))
    for t_start in starts:
        v_start = cycle.speed_at(float(t_start))
        t_stop = t_start + v_start / a_lead_max_m_s2
        t_go = t_stop + hold_s
        braking = np.where(
            t < t_start,
            np.inf,
            np.where(
                t <= t_stop,
                v_start - a_lead_max_m_s2 * (t - t_start),
                np.where(t <= t_go, 0.0, recovery_accel_m_s2 * (t - t_go)),
            ),
        )
        speeds = np.minimum(speeds, np.maximum(braking, 0.0))
    logger.debug("Injected %d brake events into %s", n_events, cycle.name)
    return limit_deceleration(DriveCycle(t, speeds, name=cycle.name), a_lead_max_m_s2)


def _jitter_idm(idm: IdmParams, fraction: float, rng: np.random.Generator) -> IdmParams:
    if fraction <= 0.0:
        return idm
    values = idm.model_dump()
    for key in sorted(values):
        values[key] = values[key] * (1.0 + rng.uniform(-fraction, fraction))
    return IdmParams(**values)


def randomize_episode(
    spec: RandomizationSpec,
    base: DriveCycle,
    episode_index: int,
    vehicle: Optional[VehicleParams] = None,
    safety: Optional[SafetyConfig] = None,
    idm: Optional[IdmParams] = None,
    filter_kind: FilterKind = FilterKind.HOCBF,
) -> EpisodeSetup:
    """
    Draw one randomized episode as a pure function of (spec.seed, episode_index).

    The initial state is resampled until it is inside the safe set under
    worst-case lead braking.

    Raises:
        InitSamplingExhausted: no admissible initial state in 1000 draws.
    """
    vehicle = vehicle or VehicleParams()
    safety = safety or SafetyConfig()
    idm = idm or IdmParams()
    rng = np.random.default_rng([spec.seed, episode_index])

    cycle = perturb_cycle(
        base, spec.speed_noise_std_m_s, spec.noise_smoothing_s, safety.a_lead_max_m_s2, rng
    )
    cycle = inject_brake_events(cycle, spec.brake_events_per_episode, safety.a_lead_max_m_s2, rng)
    if cycle is not base:
        cycle = DriveCycle(cycle.times_s, cycle.speeds_m_s, name=f"{base.name}#{episode_index}")

    v_lead = float(cycle.speeds_m_s[0])
    for _ in range(MAX_INIT_ATTEMPTS):
        gap = rng.uniform(*spec.initial_gap_range_m)
        v_host = rng.uniform(*spec.initial_host_speed_range_m_s)
        grade = rng.uniform(*spec.grade_range_rad)
        mass = rng.uniform(*spec.mass_range_kg)
        params = vehicle.model_copy(update={"mass_kg": float(mass)})
        state = SimState(
            separation_m=safety.z0_m + float(gap),
            host_speed_m_s=float(v_host),
            lead_speed_m_s=v_lead,
            gear_index=initial_gear(float(v_host), params),
            grade_rad=float(grade),
        )
        if is_initially_safe(state, params, safety, filter_kind):
            return EpisodeSetup(
                cycle=cycle,
                initial_state=state,
                vehicle_overrides={"mass_kg": float(mass)},
                idm=_jitter_idm(idm, spec.idm_jitter_fraction, rng),
            )

    raise InitSamplingExhausted(episode_index, MAX_INIT_ATTEMPTS)
