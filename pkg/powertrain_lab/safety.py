"""
Safe-set geometry and the torque safety filter.

Two barrier families are evaluated on the same relative-degree-2 constraint
z - z0 >= 0:

- hocbf: the two-region high-order barrier. Its first class-K term comes
  from the limiting relative velocity of the region the state is in.
- ecbf: the exponential barrier with linear gains k1, k2.

Both reduce to a single affine constraint on wheel torque, so the
projection of a proposed torque has the closed form min(proposed, T_ub).
Decelerations are stored as positive magnitudes throughout.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from powertrain_lab.dynamics import (
    SimState,
    VehicleParams,
    max_host_deceleration,
    resistance_force,
    torque_bounds,
)

logger = logging.getLogger(__name__)

SAFESET_COLUMNS = ["z_m", "v_h_m_s", "region", "min_lead_speed_m_s", "possible_safe"]


# ============================================================
# 1. CONFIGURATION AND RESULT TYPES
# ============================================================

class Region(str, Enum):
    REGION1 = "region1"
    REGION2 = "region2"


class FilterKind(str, Enum):
    HOCBF = "hocbf"
    ECBF = "ecbf"
    NONE = "none"


class LeadAccelMode(str, Enum):
    MEASURED = "measured"
    WORST_CASE = "worst_case"


class SafetyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    z0_m: float = Field(2.0, ge=0.0)
    a_host_max_m_s2: float = Field(2.27, gt=0.0)
    a_lead_max_m_s2: float = Field(2.0, gt=0.0)
    v_host_max_m_s: float = Field(40.0, gt=0.0)
    alpha2_gain: float = Field(2.0, gt=0.0)
    ecbf_k1: float = Field(0.1, gt=0.0)
    ecbf_k2: float = Field(1.1, gt=0.0)
    singularity_eps: float = Field(1e-3, gt=0.0)
    lead_accel_mode: LeadAccelMode = LeadAccelMode.MEASURED
    radar_range_m: float = Field(150.0, gt=0.0)

    @model_validator(mode="after")
    def _ecbf_real_roots(self) -> "SafetyConfig":
        if self.ecbf_k2 ** 2 < 4.0 * self.ecbf_k1:
            raise ValueError("ecbf gains need k2^2 >= 4 k1 (real poles)")
        return self

    @property
    def decel_ratio(self) -> float:
        """a_l,max / a_h,max."""
        return self.a_lead_max_m_s2 / self.a_host_max_m_s2

    def ecbf_poles(self) -> Tuple[float, float]:
        """(p1, p2) with p1 <= p2, p1 * p2 = k1 and p1 + p2 = k2."""
        root = math.sqrt(self.ecbf_k2 ** 2 - 4.0 * self.ecbf_k1)
        return 0.5 * (self.ecbf_k2 - root), 0.5 * (self.ecbf_k2 + root)


@dataclass(frozen=True)
class BarrierEval:
    v0: float
    v1: float
    v2_at_zero_torque: float
    torque_coeff: float
    region: Region
    lead_in_range: bool = True

    def v2(self, wheel_torque_nm: float) -> float:
        return self.v2_at_zero_torque + self.torque_coeff * wheel_torque_nm

    @property
    def torque_upper_bound(self) -> float:
        """Largest wheel torque with v2 >= 0."""
        return -self.v2_at_zero_torque / self.torque_coeff


@dataclass(frozen=True)
class FilterResult:
    safe_torque_nm: float
    intervened: bool
    infeasible: bool
    barrier: BarrierEval


# ============================================================
# 2. SAFE-SET GEOMETRY
# ============================================================

def classify_region(state: SimState, cfg: SafetyConfig) -> Region:
    """Region 1 iff the host can stop inside the current gap; the boundary belongs to region 1."""
    gap = state.separation_m - cfg.z0_m
    v = state.host_speed_m_s
    if v * v <= 2.0 * cfg.a_host_max_m_s2 * gap:
        return Region.REGION1
    return Region.REGION2


def limiting_rel_velocity_region1(gap_m: float, cfg: SafetyConfig) -> float:
    """Most negative v_l - v_h that still lets the host stop behind a stopped lead."""
    return -math.sqrt(2.0 * cfg.a_host_max_m_s2 * max(gap_m, 0.0))


def _region2_stationary(gap: float, cfg: SafetyConfig) -> bool:
    """Whether the worst host speed of the region-2 band is its interior stationary point."""
    a_h, a_l = cfg.a_host_max_m_s2, cfg.a_lead_max_m_s2
    if a_h <= a_l:
        return False
    return 2.0 * a_h * a_h * gap / (a_h - a_l) <= cfg.v_host_max_m_s ** 2


def _region2_band_empty(gap: float, cfg: SafetyConfig) -> bool:
    return cfg.v_host_max_m_s ** 2 < 2.0 * cfg.a_host_max_m_s2 * gap


def limiting_rel_velocity_region2(gap_m: float, cfg: SafetyConfig) -> float:
    """
    Limiting relative velocity over every host speed in region 2.

    For host speed v in the band [sqrt(2 a_h gap), v_host_max] the lead must
    keep v_l - v_h >= phi(v) = sqrt(r v^2 - 2 a_l gap) - v (r = a_l/a_h).
    The bound holding for the whole band is the largest phi: the stationary
    point v^2 = 2 a_h^2 gap / (a_h - a_l) when it lies in the band (value
    -sqrt(2 (a_h - a_l) gap)), otherwise the v_host_max endpoint.
    """
    gap = max(gap_m, 0.0)
    a_h, a_l = cfg.a_host_max_m_s2, cfg.a_lead_max_m_s2
    if _region2_band_empty(gap, cfg):
        return limiting_rel_velocity_region1(gap, cfg)
    if _region2_stationary(gap, cfg):
        return -math.sqrt(2.0 * (a_h - a_l) * gap)
    v = cfg.v_host_max_m_s
    return math.sqrt(max(cfg.decel_ratio * v * v - 2.0 * a_l * gap, 0.0)) - v


def stationary_gap_coefficient(cfg: SafetyConfig) -> float:
    """c in v_h^2 = c * gap at the region-2 stationary point; inf when a_l >= a_h."""
    a_h, a_l = cfg.a_host_max_m_s2, cfg.a_lead_max_m_s2
    if a_h <= a_l:
        return math.inf
    return 2.0 * a_h * a_h / (a_h - a_l)


def min_lead_speed(gap_m: float, host_speed_m_s: float, cfg: SafetyConfig) -> float:
    """
    Smallest lead speed for which max braking by both vehicles avoids z < z0.

    Zero in region 1. In region 2 either the lead stops first, which needs
    v_l >= sqrt(r v_h^2 - 2 a_l gap), or (a_h > a_l) the speeds equalise
    first, which needs v_l >= v_h - sqrt(2 (a_h - a_l) gap).
    """
    a_h, a_l = cfg.a_host_max_m_s2, cfg.a_lead_max_m_s2
    v = host_speed_m_s
    if gap_m < 0:
        return math.inf
    if v * v <= 2.0 * a_h * gap_m:
        return 0.0
    r = cfg.decel_ratio
    stop_first = math.sqrt(max(r * v * v - 2.0 * a_l * gap_m, 0.0))
    if a_h > a_l and stop_first > r * v:
        return v - math.sqrt(2.0 * (a_h - a_l) * gap_m)
    return stop_first


# ============================================================
# 3. CLASS-K FAMILY FOR THE FIRST BARRIER LEVEL
# ============================================================

class Alpha1(Protocol):
    def value(self, gap_m: float, region: Region) -> float: ...

    def derivative(self, gap_m: float, region: Region) -> float: ...


class TwoRegionAlpha:
    """alpha1(gap) = -(limiting relative velocity of the region)."""

    def __init__(self, cfg: SafetyConfig):
        self.cfg = cfg

    def value(self, gap_m: float, region: Region) -> float:
        if region == Region.REGION1:
            return -limiting_rel_velocity_region1(gap_m, self.cfg)
        return -limiting_rel_velocity_region2(gap_m, self.cfg)

    def derivative(self, gap_m: float, region: Region) -> float:
        cfg = self.cfg
        a_h, a_l = cfg.a_host_max_m_s2, cfg.a_lead_max_m_s2
        gap = max(gap_m, 0.0)
        floored = max(gap, cfg.singularity_eps)

        if region == Region.REGION1 or _region2_band_empty(gap, cfg):
            return math.sqrt(a_h / (2.0 * floored))
        if _region2_stationary(gap, cfg):
            return math.sqrt((a_h - a_l) / (2.0 * floored))
        v = cfg.v_host_max_m_s
        radicand = cfg.decel_ratio * v * v - 2.0 * a_l * gap
        return a_l / math.sqrt(max(radicand, 2.0 * a_l * cfg.singularity_eps))


class LinearAlpha:
    def __init__(self, gain: float):
        self.gain = gain

    def value(self, gap_m: float, region: Region) -> float:
        return self.gain * gap_m

    def derivative(self, gap_m: float, region: Region) -> float:
        return self.gain


# ============================================================
# 4. BARRIER EVALUATION AND PROJECTION
# ============================================================

def lead_accel_for_barrier(lead_accel_m_s2: float, cfg: SafetyConfig) -> float:
    if cfg.lead_accel_mode == LeadAccelMode.WORST_CASE:
        return -cfg.a_lead_max_m_s2
    return lead_accel_m_s2


def eval_barrier(
    state: SimState,
    lead_accel_m_s2: float,
    params: VehicleParams,
    cfg: SafetyConfig,
    kind: FilterKind = FilterKind.HOCBF,
    alpha1: Optional[Alpha1] = None,
    alpha2_gain: Optional[float] = None,
) -> BarrierEval:
    """
    Evaluate v0, v1 and the affine v2(T) at the current state.

        v0 = z - z0
        v1 = (v_l - v_h) + alpha1(v0)
        v2 = a_l + F_r/m - T/(m r_w) + Dalpha1(v0) (v_l - v_h) + alpha2 * v1

    hocbf uses the two-region alpha1 and alpha2_gain; ecbf uses the linear
    pair p1, p2 factored from k1, k2. `alpha1`/`alpha2_gain` override either.
    """
    kind = FilterKind(kind)
    gap = state.separation_m - cfg.z0_m
    region = classify_region(state, cfg)

    if alpha1 is None:
        if kind == FilterKind.ECBF:
            p1, p2 = cfg.ecbf_poles()
            alpha1 = LinearAlpha(p1)
            alpha2_gain = p2 if alpha2_gain is None else alpha2_gain
        else:
            alpha1 = TwoRegionAlpha(cfg)
    if alpha2_gain is None:
        alpha2_gain = cfg.alpha2_gain

    closing = state.lead_speed_m_s - state.host_speed_m_s
    a_l = lead_accel_for_barrier(lead_accel_m_s2, cfg)
    m, r_w = params.mass_kg, params.wheel_radius_m

    v1 = closing + alpha1.value(gap, region)
    v2_zero = (
        a_l
        + resistance_force(state, params) / m
        + alpha1.derivative(gap, region) * closing
        + alpha2_gain * v1
    )
    return BarrierEval(
        v0=gap,
        v1=v1,
        v2_at_zero_torque=v2_zero,
        torque_coeff=-1.0 / (m * r_w),
        region=region,
        lead_in_range=state.separation_m <= cfg.radar_range_m,
    )


def filter_action(
    proposed_torque_nm: float,
    state: SimState,
    lead_accel_m_s2: float,
    params: VehicleParams,
    cfg: SafetyConfig,
    kind: FilterKind = FilterKind.HOCBF,
) -> FilterResult:
    """
    Project a proposed wheel torque onto {T : v2(T) >= 0} within actuator bounds.

    One scalar variable and one affine constraint, so the least-squares
    projection is min(proposed, T_ub) followed by the actuator clamp.
    A lead beyond radar range imposes no constraint.
    """
    if not math.isfinite(proposed_torque_nm):
        raise ValueError(f"proposed torque must be finite, got {proposed_torque_nm}")

    kind = FilterKind(kind)
    lo, hi = torque_bounds(state, params)
    barrier = eval_barrier(state, lead_accel_m_s2, params, cfg, kind)

    infeasible = False
    if kind == FilterKind.NONE or not barrier.lead_in_range:
        safe = min(max(proposed_torque_nm, lo), hi)
    else:
        t_ub = barrier.torque_upper_bound
        infeasible = t_ub < lo
        safe = min(max(min(proposed_torque_nm, t_ub), lo), hi)
        if infeasible:
            logger.debug(
                "filter infeasible at t=%.1fs: T_ub=%.1f below brake limit", state.time_s, t_ub
            )

    return FilterResult(
        safe_torque_nm=safe,
        intervened=abs(safe - proposed_torque_nm) > 1e-9,
        infeasible=infeasible,
        barrier=barrier,
    )


def is_initially_safe(
    state: SimState,
    params: VehicleParams,
    cfg: SafetyConfig,
    kind: FilterKind = FilterKind.HOCBF,
) -> bool:
    """v0, v1 >= 0 and v2 >= 0 at full brake, assuming the lead brakes as hard as it can."""
    kind = FilterKind(kind)
    if kind == FilterKind.NONE:
        kind = FilterKind.HOCBF
    worst = cfg.model_copy(update={"lead_accel_mode": LeadAccelMode.WORST_CASE})
    barrier = eval_barrier(state, 0.0, params, worst, kind)
    return (
        barrier.v0 >= 0.0
        and barrier.v1 >= 0.0
        and barrier.v2(-params.max_brake_torque_nm) >= 0.0
    )


# ============================================================
# 5. GRID EXPORTS AND THE ROLLOUT ORACLE
# ============================================================

def safe_set_grid(
    cfg: SafetyConfig,
    params: VehicleParams,
    z_range: Tuple[float, float],
    v_h_range: Tuple[float, float],
    resolution: int,
) -> pd.DataFrame:
    """
    Possible-safe map over (z, v_h) cells.

    Returns:
        DataFrame with columns z_m, v_h_m_s, region, min_lead_speed_m_s,
        possible_safe. A cell is possibly safe when z >= z0 and some lead
        speed up to v_host_max keeps it safe.
    """
    if resolution < 1:
        raise ValueError("resolution must be at least 1")
    if z_range[1] < z_range[0] or v_h_range[1] < v_h_range[0]:
        raise ValueError("grid ranges must be (low, high)")

    rows = []
    for z in np.linspace(z_range[0], z_range[1], resolution):
        for v_h in np.linspace(v_h_range[0], v_h_range[1], resolution):
            state = SimState(separation_m=float(z), host_speed_m_s=float(v_h), lead_speed_m_s=0.0, gear_index=0)
            v_min = min_lead_speed(float(z) - cfg.z0_m, float(v_h), cfg)
            rows.append(
                {
                    "z_m": float(z),
                    "v_h_m_s": float(v_h),
                    "region": classify_region(state, cfg).value,
                    "min_lead_speed_m_s": v_min,
                    "possible_safe": bool(v_min <= cfg.v_host_max_m_s),
                }
            )
    return pd.DataFrame(rows, columns=SAFESET_COLUMNS)


def limiting_velocity_table(cfg: SafetyConfig, gaps_m: np.ndarray) -> pd.DataFrame:
    """Allowable relative velocity against gap for both regions."""
    return pd.DataFrame(
        {
            "gap_m": gaps_m,
            "region1_m_s": [limiting_rel_velocity_region1(g, cfg) for g in gaps_m],
            "region2_m_s": [limiting_rel_velocity_region2(g, cfg) for g in gaps_m],
        }
    )


def brute_force_safe(
    z: float,
    v_h: float,
    v_l: float,
    params: VehicleParams,
    cfg: SafetyConfig,
    dt: float = 0.005,
) -> bool:
    """
    Independent rollout check: both vehicles brake at their limits until
    rest, and the state is safe iff z stays >= z0 at every sample.

    The host brakes at the configured bound or at what its brakes can do
    on level road, whichever is weaker.
    """
    a_h = min(cfg.a_host_max_m_s2, max_host_deceleration(params))
    a_l = cfg.a_lead_max_m_s2
    t_end = max(v_h / a_h, v_l / a_l)
    t = np.append(np.arange(0.0, t_end, dt), t_end)

    t_h = np.minimum(t, v_h / a_h)
    t_l = np.minimum(t, v_l / a_l)
    x_h = v_h * t_h - 0.5 * a_h * t_h ** 2
    x_l = v_l * t_l - 0.5 * a_l * t_l ** 2
    separation = z + x_l - x_h
    return bool(np.all(separation >= cfg.z0_m - 1e-9))
