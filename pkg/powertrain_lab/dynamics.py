import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.interpolate import RegularGridInterpolator

from powertrain_lab.errors import ConfigError, NonFiniteState, OutOfEnvelope

logger = logging.getLogger(__name__)

RPM_PER_RAD_S = 60.0 / (2.0 * math.pi)

# 10-speed AMT: geometric ladder 12.8 -> 1.0
DEFAULT_GEAR_RATIOS: Tuple[float, ...] = tuple(
    float(r) for r in np.geomspace(12.8, 1.0, 10)
)

FUEL_MAP_COLUMNS = ["engine_speed_rpm", "engine_torque_nm", "fuel_rate_g_s"]


# ============================================================
# 1. PARAMETER MODELS
# ============================================================

class FuelModelKind(str, Enum):
    SYNTHETIC_WILLANS = "synthetic_willans"
    TABULATED = "tabulated"


class FuelModel(BaseModel):
    """
    Engine fuel-rate model.

    The synthetic kind is a Willans line with an efficiency bowl:
        rate = idle + c_p(rpm) * P_e + c_w * rev/s / 1000,   P_e > 0
        c_p(rpm) = c_p0 * (1 + curvature * ((rpm - optimal) / 1000)^2)
    and exactly the idle rate when engine power is not positive.

    The tabulated kind interpolates a rectangular (speed, torque) grid
    bilinearly, clamped to the grid edges and floored at the idle rate.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: FuelModelKind = FuelModelKind.SYNTHETIC_WILLANS
    idle_rate_g_s: float = Field(0.4, ge=0.0)
    power_coeff_g_per_kJ: float = Field(0.058, gt=0.0)
    speed_coeff_g_per_krev: float = Field(17.4, ge=0.0)
    optimal_speed_rpm: float = Field(1300.0, gt=0.0)
    speed_curvature: float = Field(0.15, ge=0.0)
    table_speed_rpm: Optional[Tuple[float, ...]] = None
    table_torque_nm: Optional[Tuple[float, ...]] = None
    table_fuel_g_s: Optional[Tuple[Tuple[float, ...], ...]] = None

    @model_validator(mode="after")
    def _check_table(self) -> "FuelModel":
        if self.kind != FuelModelKind.TABULATED:
            return self
        if self.table_speed_rpm is None or self.table_torque_nm is None or self.table_fuel_g_s is None:
            raise ValueError("tabulated fuel model needs speed, torque and fuel tables")
        speeds = np.asarray(self.table_speed_rpm)
        torques = np.asarray(self.table_torque_nm)
        values = np.asarray(self.table_fuel_g_s, dtype=float)
        if len(speeds) < 2 or len(torques) < 2:
            raise ValueError("fuel map needs at least 2 speeds and 2 torques")
        if np.any(np.diff(speeds) <= 0) or np.any(np.diff(torques) <= 0):
            raise ValueError("fuel map axes must be strictly ascending")
        if values.shape != (len(speeds), len(torques)):
            raise ValueError(
                f"fuel map grid has shape {values.shape}, expected {(len(speeds), len(torques))}"
            )
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("fuel map values must be finite and non-negative")
        return self

    def fuel_rate(self, engine_speed_rpm: float, engine_torque_nm: float) -> float:
        """Fuel rate in g/s at one operating point."""
        power_kw = engine_torque_nm * engine_speed_rpm / RPM_PER_RAD_S / 1000.0
        if power_kw <= 0.0:
            return self.idle_rate_g_s

        if self.kind == FuelModelKind.TABULATED:
            interp = _table_interpolator(
                self.table_speed_rpm, self.table_torque_nm, self.table_fuel_g_s
            )
            speed = min(max(engine_speed_rpm, self.table_speed_rpm[0]), self.table_speed_rpm[-1])
            torque = min(max(engine_torque_nm, self.table_torque_nm[0]), self.table_torque_nm[-1])
            return max(self.idle_rate_g_s, float(interp([[speed, torque]])[0]))

        offset = (engine_speed_rpm - self.optimal_speed_rpm) / 1000.0
        c_p = self.power_coeff_g_per_kJ * (1.0 + self.speed_curvature * offset * offset)
        rev_per_s = engine_speed_rpm / 60.0
        return (
            self.idle_rate_g_s
            + c_p * power_kw
            + self.speed_coeff_g_per_krev * rev_per_s / 1000.0
        )


@lru_cache(maxsize=16)
def _table_interpolator(speeds, torques, values) -> RegularGridInterpolator:
    return RegularGridInterpolator(
        (np.asarray(speeds, dtype=float), np.asarray(torques, dtype=float)),
        np.asarray(values, dtype=float),
        method="linear",
    )


class VehicleParams(BaseModel):
    """Physical and powertrain constants of the host truck."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mass_kg: float = Field(8500.0, gt=0.0)
    frontal_area_m2: float = Field(7.71, gt=0.0)
    drag_coeff: float = Field(0.08, ge=0.0)
    rolling_coeff: float = Field(0.015, ge=0.0)
    wheel_radius_m: float = Field(0.5, gt=0.0)
    air_density_kg_m3: float = Field(1.2, gt=0.0)
    gravity_m_s2: float = Field(9.81, gt=0.0)
    gear_ratios: Tuple[float, ...] = DEFAULT_GEAR_RATIOS
    final_drive_ratio: float = Field(3.7, gt=0.0)
    driveline_efficiency: float = Field(0.95, gt=0.0, le=1.0)
    max_engine_torque_nm: float = Field(1000.0, gt=0.0)
    max_brake_torque_nm: float = Field(15000.0, gt=0.0)
    engine_speed_range_rpm: Tuple[float, float] = (600.0, 2400.0)
    fuel_model: FuelModel = FuelModel()

    @field_validator("gear_ratios")
    @classmethod
    def _ratios_decreasing(cls, ratios: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(ratios) < 1 or any(r <= 0 for r in ratios):
            raise ValueError("gear ratios must be positive")
        if any(b >= a for a, b in zip(ratios, ratios[1:])):
            raise ValueError("gear ratios must be strictly decreasing")
        return ratios

    @field_validator("engine_speed_range_rpm")
    @classmethod
    def _speed_range(cls, rng: Tuple[float, float]) -> Tuple[float, float]:
        if not 0 <= rng[0] < rng[1]:
            raise ValueError("engine speed range must be (low, high) with 0 <= low < high")
        return rng

    @property
    def n_gears(self) -> int:
        return len(self.gear_ratios)

    def overall_ratio(self, gear_index: int) -> float:
        return self.gear_ratios[gear_index] * self.final_drive_ratio

    def max_wheel_torque_nm(self, gear_index: int = 0) -> float:
        """Drive torque at the wheel with full engine torque in the given gear."""
        return self.max_engine_torque_nm * self.overall_ratio(gear_index) * self.driveline_efficiency


# ============================================================
# 2. STATE TYPES
# ============================================================

@dataclass(frozen=True)
class SimState:
    separation_m: float
    host_speed_m_s: float
    lead_speed_m_s: float
    gear_index: int
    grade_rad: float = 0.0
    prev_wheel_torque_nm: float = 0.0
    time_s: float = 0.0
    shift_steps_left: int = 0

    @property
    def gap_speed_m_s(self) -> float:
        """Relative velocity v_l - v_h (positive when the gap opens)."""
        return self.lead_speed_m_s - self.host_speed_m_s


@dataclass(frozen=True)
class PowertrainPoint:
    engine_speed_rpm: float
    engine_torque_nm: float
    wheel_torque_nm: float
    fuel_rate_g_s: float


# ============================================================
# 3. LONGITUDINAL DYNAMICS
# ============================================================

class Integrator(str, Enum):
    SEMI_IMPLICIT = "semi_implicit"
    EXPLICIT = "explicit"


def resistance_force(state: SimState, params: VehicleParams) -> float:
    """
    Total resistance: aerodynamic + rolling + grade.

    Example:
        v_h=0, m=12000, theta=0, f=0.015 -> 1765.8 N
    """
    v = state.host_speed_m_s
    theta = state.grade_rad
    aero = 0.5 * params.air_density_kg_m3 * params.frontal_area_m2 * params.drag_coeff * v * v
    weight = params.mass_kg * params.gravity_m_s2
    return aero + weight * params.rolling_coeff * math.cos(theta) + weight * math.sin(theta)


def host_acceleration(state: SimState, wheel_torque_nm: float, params: VehicleParams) -> float:
    return (
        wheel_torque_nm / (params.wheel_radius_m * params.mass_kg)
        - resistance_force(state, params) / params.mass_kg
    )


def max_host_deceleration(params: VehicleParams, grade_rad: float = 0.0) -> float:
    """Braking capability T_b/(r_w m) + g sin(theta), as a positive magnitude."""
    return (
        params.max_brake_torque_nm / (params.wheel_radius_m * params.mass_kg)
        + params.gravity_m_s2 * math.sin(grade_rad)
    )


def step(
    state: SimState,
    wheel_torque_nm: float,
    lead_accel_m_s2: float,
    dt_s: float,
    params: VehicleParams,
    integrator: Integrator = Integrator.EXPLICIT,
) -> SimState:
    """
    Advance the car-following state by one fixed step.

    Explicit Euler by default: the separation moves with the speeds at the
    start of the step. The semi-implicit arrangement integrates it with the
    updated speeds instead. Speeds are floored at zero (no reverse driving)
    and a shift in progress counts down one step.

    Raises:
        NonFiniteState: any input or resulting state value is not finite.
    """
    if dt_s <= 0:
        raise ValueError(f"dt_s must be positive, got {dt_s}")
    inputs = (
        state.separation_m, state.host_speed_m_s, state.lead_speed_m_s,
        state.grade_rad, wheel_torque_nm, lead_accel_m_s2,
    )
    if not all(math.isfinite(x) for x in inputs):
        raise NonFiniteState(f"non-finite step input at t={state.time_s:.2f}s: {inputs}")

    a_host = host_acceleration(state, wheel_torque_nm, params)
    v_h = max(0.0, state.host_speed_m_s + a_host * dt_s)
    v_l = max(0.0, state.lead_speed_m_s + lead_accel_m_s2 * dt_s)

    if Integrator(integrator) == Integrator.SEMI_IMPLICIT:
        z = state.separation_m + (v_l - v_h) * dt_s
    else:
        z = state.separation_m + (state.lead_speed_m_s - state.host_speed_m_s) * dt_s

    if not (math.isfinite(z) and math.isfinite(v_h) and math.isfinite(v_l)):
        raise NonFiniteState(f"non-finite state after step at t={state.time_s:.2f}s")

    return replace(
        state,
        separation_m=z,
        host_speed_m_s=v_h,
        lead_speed_m_s=v_l,
        prev_wheel_torque_nm=wheel_torque_nm,
        time_s=state.time_s + dt_s,
        shift_steps_left=max(0, state.shift_steps_left - 1),
    )


# ============================================================
# 4. POWERTRAIN KINEMATICS
# ============================================================

def engine_speed_rpm(host_speed_m_s: float, gear_index: int, params: VehicleParams) -> float:
    return host_speed_m_s / params.wheel_radius_m * params.overall_ratio(gear_index) * RPM_PER_RAD_S


def engine_torque_for(wheel_torque_nm: float, gear_index: int, params: VehicleParams) -> float:
    # Efficiency sits on the engine side for traction, on the wheel side when
    # power flows back into the driveline.
    ratio = params.overall_ratio(gear_index)
    if wheel_torque_nm >= 0:
        return wheel_torque_nm / (ratio * params.driveline_efficiency)
    return wheel_torque_nm * params.driveline_efficiency / ratio


def wheel_torque_for(engine_torque_nm: float, gear_index: int, params: VehicleParams) -> float:
    ratio = params.overall_ratio(gear_index)
    if engine_torque_nm >= 0:
        return engine_torque_nm * ratio * params.driveline_efficiency
    return engine_torque_nm * ratio / params.driveline_efficiency


def powertrain_point(
    state: SimState,
    wheel_torque_nm: float,
    params: VehicleParams,
    strict: bool = True,
) -> PowertrainPoint:
    """
    Engine operating point that delivers `wheel_torque_nm` in the current gear.

    With strict=True an operating point outside the engine envelope raises
    OutOfEnvelope (used by gear feasibility checks). With strict=False the
    engine speed is clamped into the envelope before the fuel lookup, which
    models idling at standstill and clutch slip at launch.

    Example:
        v_h=15, r_w=0.5, gear ratio 2, final drive 3 -> ~1718.9 rpm
    """
    if not 0 <= state.gear_index < params.n_gears:
        raise ValueError(f"gear index {state.gear_index} outside 0..{params.n_gears - 1}")

    rpm = engine_speed_rpm(state.host_speed_m_s, state.gear_index, params)
    engine_torque = engine_torque_for(wheel_torque_nm, state.gear_index, params)
    lo_rpm, hi_rpm = params.engine_speed_range_rpm

    if strict:
        if rpm < lo_rpm or rpm > hi_rpm:
            raise OutOfEnvelope(
                f"engine speed {rpm:.1f} rpm outside [{lo_rpm}, {hi_rpm}]", rpm, engine_torque
            )
        if engine_torque > params.max_engine_torque_nm * (1.0 + 1e-12):
            raise OutOfEnvelope(
                f"engine torque {engine_torque:.1f} N·m above {params.max_engine_torque_nm}",
                rpm,
                engine_torque,
            )
    else:
        rpm = min(max(rpm, lo_rpm), hi_rpm)

    return PowertrainPoint(
        engine_speed_rpm=rpm,
        engine_torque_nm=engine_torque,
        wheel_torque_nm=wheel_torque_nm,
        fuel_rate_g_s=params.fuel_model.fuel_rate(rpm, engine_torque),
    )


def torque_bounds(state: SimState, params: VehicleParams) -> Tuple[float, float]:
    """
    Actuator bounds on wheel torque in the current gear.

    Returns:
        (-max_brake_torque, gear-feasible drive max). The drive max is zero
        when the engine would be above its top speed (governor cut-off).
    """
    rpm = engine_speed_rpm(state.host_speed_m_s, state.gear_index, params)
    if rpm > params.engine_speed_range_rpm[1]:
        return -params.max_brake_torque_nm, 0.0
    return -params.max_brake_torque_nm, params.max_wheel_torque_nm(state.gear_index)


def apply_gear_change(state: SimState, delta: int, n_gears: int = 10, shift_steps: int = 0) -> SimState:
    """
    Shift by delta in {-1, 0, +1}.

    A shift past either end of the ladder is a no-op, and so is any request
    while an earlier shift is still in progress. A realized shift opens the
    clutch for `shift_steps` steps (see `traction_interrupted`).
    """
    if delta not in (-1, 0, 1):
        raise ValueError(f"gear delta must be -1, 0 or +1, got {delta}")
    if state.shift_steps_left > 0:
        return state
    gear = min(max(state.gear_index + delta, 0), n_gears - 1)
    if gear == state.gear_index:
        return state
    return replace(state, gear_index=gear, shift_steps_left=max(0, int(shift_steps)))


def shift_steps_for(shift_time_s: float, dt_s: float) -> int:
    """Whole simulation steps the clutch stays open for one AMT shift."""
    return max(0, int(round(shift_time_s / dt_s)))


def traction_interrupted(state: SimState) -> bool:
    """True while a shift is in progress: no drive torque, brakes unaffected."""
    return state.shift_steps_left > 0


def initial_gear(host_speed_m_s: float, params: VehicleParams, launch_rpm: float = 1100.0) -> int:
    """Highest gear that keeps the engine at or above `launch_rpm`; gear 0 otherwise."""
    best = 0
    for gear in range(params.n_gears):
        if engine_speed_rpm(host_speed_m_s, gear, params) >= launch_rpm:
            best = gear
    return best


# ============================================================
# 5. FUEL MAP INGESTION
# ============================================================

def load_fuel_map_csv(path: str, idle_rate_g_s: float = 0.4) -> FuelModel:
    """
    Read a fuel map CSV (engine_speed_rpm, engine_torque_nm, fuel_rate_g_s)
    laid out as a rectangular, row-major ascending grid.
    """
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ConfigError(f"could not read fuel map {path}: {e}") from e

    missing = [c for c in FUEL_MAP_COLUMNS if c not in df.columns]
    if missing:
        raise ConfigError(f"fuel map {path} is missing columns {missing}")

    df = df.sort_values(["engine_speed_rpm", "engine_torque_nm"])
    speeds = tuple(float(s) for s in df["engine_speed_rpm"].unique())
    torques = tuple(float(t) for t in df["engine_torque_nm"].unique())
    if len(df) != len(speeds) * len(torques):
        raise ConfigError(
            f"fuel map {path} is not a rectangular grid "
            f"({len(df)} rows for {len(speeds)} speeds x {len(torques)} torques)"
        )
    grid = df["fuel_rate_g_s"].to_numpy(dtype=float).reshape(len(speeds), len(torques))

    try:
        model = FuelModel(
            kind=FuelModelKind.TABULATED,
            idle_rate_g_s=idle_rate_g_s,
            table_speed_rpm=speeds,
            table_torque_nm=torques,
            table_fuel_g_s=tuple(tuple(float(v) for v in row) for row in grid),
        )
    except ValueError as e:
        raise ConfigError(f"invalid fuel map {path}: {e}") from e

    logger.info("Loaded fuel map %s (%d x %d)", path, len(speeds), len(torques))
    return model
