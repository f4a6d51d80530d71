import math

import numpy as np
import pytest
from scipy.optimize import minimize

from powertrain_lab.dynamics import (
    SimState,
    VehicleParams,
    max_host_deceleration,
    resistance_force,
    torque_bounds,
)
from powertrain_lab.safety import (
    SAFESET_COLUMNS,
    FilterKind,
    LeadAccelMode,
    LinearAlpha,
    Region,
    SafetyConfig,
    TwoRegionAlpha,
    brute_force_safe,
    classify_region,
    eval_barrier,
    filter_action,
    is_initially_safe,
    limiting_rel_velocity_region1,
    limiting_rel_velocity_region2,
    limiting_velocity_table,
    min_lead_speed,
    safe_set_grid,
    stationary_gap_coefficient,
)


@pytest.fixture
def cfg():
    return SafetyConfig()


@pytest.fixture
def params():
    return VehicleParams()


def state_at(gap, v_h, v_l=0.0, gear=5, grade=0.0, z0=2.0):
    return SimState(separation_m=z0 + gap, host_speed_m_s=v_h, lead_speed_m_s=v_l, gear_index=gear, grade_rad=grade)


def random_states(rng, n, params, gap_range=(0.0, 100.0)):
    states = []
    for _ in range(n):
        v_h = rng.uniform(0.0, 35.0)
        gear = int(rng.integers(0, params.n_gears))
        states.append(
            SimState(
                separation_m=2.0 + rng.uniform(*gap_range),
                host_speed_m_s=v_h,
                lead_speed_m_s=rng.uniform(0.0, 35.0),
                gear_index=gear,
                grade_rad=rng.uniform(-0.03, 0.03),
            )
        )
    return states


# ============================================================
# 1. CONFIG AND CONSTANTS
# ============================================================

def test_config_rejects_complex_ecbf_poles():
    with pytest.raises(ValueError):
        SafetyConfig(ecbf_k1=1.0, ecbf_k2=1.0)


def test_ecbf_poles_factor_gains(cfg):
    p1, p2 = cfg.ecbf_poles()
    assert p1 == pytest.approx(0.1)
    assert p2 == pytest.approx(1.0)
    assert p1 * p2 == pytest.approx(cfg.ecbf_k1)
    assert p1 + p2 == pytest.approx(cfg.ecbf_k2)


def test_barrier_constants(cfg):
    assert 2.0 * cfg.a_host_max_m_s2 == pytest.approx(4.54, rel=0.01)
    assert cfg.decel_ratio == pytest.approx(0.88, rel=0.01)
    coefficient = stationary_gap_coefficient(cfg)
    assert coefficient == pytest.approx(38.2, rel=0.01)
    assert coefficient != pytest.approx(33.6, rel=0.05)


def test_stationary_coefficient_without_interior_point():
    assert stationary_gap_coefficient(SafetyConfig(a_lead_max_m_s2=2.27)) == math.inf


# ============================================================
# 2. REGIONS AND LIMITING VELOCITIES
# ============================================================

@pytest.mark.parametrize(
    "gap, v_h, expected",
    [(30.0, 10.0, Region.REGION1), (0.0, 0.0, Region.REGION1), (30.0, 20.0, Region.REGION2), (-0.5, 0.0, Region.REGION2)],
)
def test_classify_region(cfg, gap, v_h, expected):
    assert classify_region(state_at(gap, v_h), cfg) == expected


def test_region_boundary_belongs_to_region1(cfg):
    gap = 100.0 / (2.0 * cfg.a_host_max_m_s2)
    assert classify_region(state_at(gap, 10.0), cfg) == Region.REGION1


def test_region1_limiting_velocity(cfg):
    assert limiting_rel_velocity_region1(0.0, cfg) == 0.0
    assert limiting_rel_velocity_region1(22.03, cfg) == pytest.approx(-10.0, abs=1e-3)
    assert limiting_rel_velocity_region1(50.0, cfg) == pytest.approx(-15.07, abs=0.01)


def test_region2_limiting_velocity_examples(cfg):
    assert limiting_rel_velocity_region2(0.0, cfg) == 0.0
    assert limiting_rel_velocity_region2(10.0, cfg) == pytest.approx(-math.sqrt(2 * 0.27 * 10.0))
    assert limiting_rel_velocity_region2(50.0, cfg) == pytest.approx(math.sqrt(2.0 / 2.27 * 1600 - 200) - 40)
    assert limiting_rel_velocity_region2(50.0, cfg) > limiting_rel_velocity_region1(50.0, cfg)


def test_region2_equal_decelerations_at_zero_gap():
    cfg = SafetyConfig(a_lead_max_m_s2=2.27)
    assert limiting_rel_velocity_region2(0.0, cfg) == pytest.approx(0.0, abs=1e-12)


def _grid_oracle(gap, cfg, step=0.001):
    r = cfg.decel_ratio
    lo = math.sqrt(2.0 * cfg.a_host_max_m_s2 * gap)
    if lo > cfg.v_host_max_m_s:
        return -lo
    v = np.append(np.arange(lo, cfg.v_host_max_m_s, step), cfg.v_host_max_m_s)
    phi = np.sqrt(np.maximum(r * v ** 2 - 2.0 * cfg.a_lead_max_m_s2 * gap, 0.0)) - v
    return float(phi.max())


@pytest.mark.parametrize("a_lead", [1.0, 2.0, 2.27, 3.0])
@pytest.mark.parametrize("gap", [0.0, 1.0, 10.0, 41.9, 50.0, 120.0, 400.0])
def test_region2_matches_grid_oracle(a_lead, gap):
    cfg = SafetyConfig(a_lead_max_m_s2=a_lead)
    assert limiting_rel_velocity_region2(gap, cfg) == pytest.approx(_grid_oracle(gap, cfg), abs=2e-3)


@pytest.mark.parametrize("gap", np.linspace(0.0, 300.0, 31))
def test_region2_never_more_permissive(cfg, gap):
    assert limiting_rel_velocity_region2(gap, cfg) >= limiting_rel_velocity_region1(gap, cfg) - 1e-12


def test_limiting_velocity_table(cfg):
    table = limiting_velocity_table(cfg, np.array([0.0, 10.0, 50.0]))
    assert list(table.columns) == ["gap_m", "region1_m_s", "region2_m_s"]
    assert table["region2_m_s"].iloc[2] == pytest.approx(limiting_rel_velocity_region2(50.0, cfg))


# ============================================================
# 3. BARRIER EVALUATION
# ============================================================

def test_barrier_at_rest_on_boundary(cfg, params):
    barrier = eval_barrier(state_at(0.0, 0.0, 0.0), 0.0, params, cfg, FilterKind.HOCBF)
    assert barrier.v0 == 0.0
    assert barrier.v1 == 0.0


def test_region1_on_limiting_curve(cfg, params):
    gap = 100.0 / (2.0 * cfg.a_host_max_m_s2)
    barrier = eval_barrier(state_at(gap, 10.0, 0.0), 0.0, params, cfg, FilterKind.HOCBF)
    assert barrier.region == Region.REGION1
    assert barrier.v1 == pytest.approx(0.0, abs=1e-12)


def test_ecbf_linear_position_term(cfg, params):
    s = state_at(10.0, 15.0, 15.0, gear=8)
    barrier = eval_barrier(s, 0.0, params, cfg, FilterKind.ECBF)
    torque = resistance_force(s, params) * params.wheel_radius_m
    assert barrier.v2(torque) == pytest.approx(cfg.ecbf_k1 * 10.0, abs=1e-12)


def test_torque_coefficient_exact(cfg, params):
    barrier = eval_barrier(state_at(20.0, 10.0, 12.0), 0.3, params, cfg)
    assert barrier.torque_coeff == -1.0 / (params.mass_kg * params.wheel_radius_m)
    assert barrier.v2(1000.0) == barrier.v2_at_zero_torque + barrier.torque_coeff * 1000.0


def test_worst_case_lead_mode(params):
    measured = SafetyConfig()
    worst = SafetyConfig(lead_accel_mode=LeadAccelMode.WORST_CASE)
    s = state_at(30.0, 10.0, 12.0)
    diff = eval_barrier(s, 0.5, params, measured).v2_at_zero_torque - eval_barrier(s, 0.5, params, worst).v2_at_zero_torque
    assert diff == pytest.approx(0.5 + 2.0)


def test_ecbf_is_linear_special_case(cfg, params):
    p1, p2 = cfg.ecbf_poles()
    rng = np.random.default_rng(11)
    for s in random_states(rng, 200, params, gap_range=(-1.0, 120.0)):
        a_l = rng.uniform(-2.0, 1.5)
        gap = s.separation_m - cfg.z0_m
        v_rel = s.lead_speed_m_s - s.host_speed_m_s
        direct = a_l + resistance_force(s, params) / params.mass_kg + cfg.ecbf_k1 * gap + cfg.ecbf_k2 * v_rel
        generic = eval_barrier(s, a_l, params, cfg, FilterKind.HOCBF, alpha1=LinearAlpha(p1), alpha2_gain=p2)
        builtin = eval_barrier(s, a_l, params, cfg, FilterKind.ECBF)
        assert generic.v2_at_zero_torque == pytest.approx(direct, abs=1e-12)
        assert builtin.v2_at_zero_torque == pytest.approx(direct, abs=1e-12)


def test_region1_is_more_permissive(cfg):
    alpha = TwoRegionAlpha(cfg)
    rng = np.random.default_rng(5)
    for _ in range(500):
        gap = rng.uniform(0.0, 150.0)
        v_h = rng.uniform(0.0, math.sqrt(2.0 * cfg.a_host_max_m_s2 * gap))
        v1_region1 = -v_h + alpha.value(gap, Region.REGION1)
        v1_region2 = -v_h + alpha.value(gap, Region.REGION2)
        assert v1_region1 >= v1_region2 - 1e-12


def test_derivative_matches_finite_difference(cfg):
    alpha = TwoRegionAlpha(cfg)
    for region in Region:
        for gap in (2.0, 10.0, 41.0, 43.0, 60.0, 200.0):
            h = 1e-6
            numeric = (alpha.value(gap + h, region) - alpha.value(gap - h, region)) / (2 * h)
            assert alpha.derivative(gap, region) == pytest.approx(numeric, rel=1e-5)


def test_derivative_floored_at_boundary(cfg):
    alpha = TwoRegionAlpha(cfg)
    at_zero = alpha.derivative(0.0, Region.REGION1)
    assert math.isfinite(at_zero)
    assert at_zero == pytest.approx(math.sqrt(cfg.a_host_max_m_s2 / (2.0 * cfg.singularity_eps)))


# ============================================================
# 4. PROJECTION
# ============================================================

def test_feasible_proposal_passes_through(cfg, params):
    s = state_at(80.0, 10.0, 12.0)
    result = filter_action(500.0, s, 0.0, params, cfg)
    assert result.safe_torque_nm == 500.0
    assert not result.intervened
    assert not result.infeasible


def test_binding_case_returns_upper_bound(cfg, params):
    s = state_at(10.0, 6.0, 0.0, gear=5)
    bound = eval_barrier(s, 0.0, params, cfg).torque_upper_bound
    lo, hi = torque_bounds(s, params)
    assert lo < bound < hi
    result = filter_action(hi, s, 0.0, params, cfg)
    assert result.safe_torque_nm == bound
    assert result.intervened
    assert result.barrier.v2(result.safe_torque_nm) == pytest.approx(0.0, abs=1e-9)


def test_infeasible_brakes_fully(cfg, params):
    s = state_at(1.0, 20.0, 0.0, gear=8)
    result = filter_action(0.0, s, -2.0, params, cfg)
    assert result.infeasible
    assert result.safe_torque_nm == -params.max_brake_torque_nm


def test_no_filter_only_clamps(cfg, params):
    s = state_at(1.0, 20.0, 0.0, gear=8)
    lo, hi = torque_bounds(s, params)
    result = filter_action(1e9, s, -2.0, params, cfg, FilterKind.NONE)
    assert result.safe_torque_nm == hi
    assert not result.infeasible


def test_lead_out_of_radar_is_unconstrained(cfg, params):
    s = state_at(200.0, 30.0, 0.0, gear=9)
    result = filter_action(100.0, s, 0.0, params, cfg)
    assert not result.barrier.lead_in_range
    assert result.safe_torque_nm == 100.0


def _qp_oracle(proposed, barrier, lo, hi, scale=1e4):
    # minimize 0.5 (x - p)^2  s.t.  v2(x * scale) >= 0,  lo <= x * scale <= hi
    p = proposed / scale
    res = minimize(
        lambda x: 0.5 * (x[0] - p) ** 2,
        x0=[min(max(p, lo / scale), hi / scale)],
        jac=lambda x: np.array([x[0] - p]),
        method="SLSQP",
        bounds=[(lo / scale, hi / scale)],
        constraints=[{
            "type": "ineq",
            "fun": lambda x: np.array([barrier.v2(x[0] * scale)]),
            "jac": lambda x: np.array([[barrier.torque_coeff * scale]]),
        }],
        options={"ftol": 1e-15, "maxiter": 200},
    )
    return res.x[0] * scale


@pytest.mark.parametrize("kind", [FilterKind.HOCBF, FilterKind.ECBF])
def test_projection_matches_numeric_qp(cfg, params, kind):
    rng = np.random.default_rng(2024)
    checked = 0
    for s in random_states(rng, 1000, params):
        lead_accel = rng.uniform(-2.0, 1.0)
        lo, hi = torque_bounds(s, params)
        proposed = rng.uniform(lo, max(hi, 1.0))
        result = filter_action(proposed, s, lead_accel, params, cfg, kind)
        if result.infeasible:
            assert result.safe_torque_nm == lo
            continue
        assert result.barrier.v2(result.safe_torque_nm) >= -1e-9
        if not result.barrier.lead_in_range:
            continue
        oracle = _qp_oracle(proposed, result.barrier, lo, hi)
        assert result.safe_torque_nm == pytest.approx(oracle, abs=1e-6)
        checked += 1
    assert checked > 500


def test_region1_upper_bound_monotone_in_gap(cfg, params):
    rng = np.random.default_rng(8)
    for _ in range(300):
        v_h = rng.uniform(0.0, 25.0)
        v_l = rng.uniform(0.0, v_h)
        gap = max(1.0, v_h ** 2 / (2.0 * cfg.a_host_max_m_s2)) + rng.uniform(0.0, 20.0)
        bounds = [
            eval_barrier(state_at(g, v_h, v_l), 0.0, params, cfg).torque_upper_bound
            for g in np.linspace(gap, gap + 30.0, 16)
        ]
        assert np.all(np.diff(bounds) >= -1e-9)


def test_ecbf_upper_bound_monotone_in_gap(cfg, params):
    rng = np.random.default_rng(9)
    for _ in range(100):
        v_h, v_l = rng.uniform(0.0, 30.0, size=2)
        bounds = [
            eval_barrier(state_at(g, v_h, v_l), 0.0, params, cfg, FilterKind.ECBF).torque_upper_bound
            for g in np.linspace(0.0, 100.0, 21)
        ]
        assert np.all(np.diff(bounds) >= 0.0)


def test_initial_safety_check(cfg, params):
    assert is_initially_safe(state_at(60.0, 5.0, 0.0, gear=7), params, cfg)
    assert not is_initially_safe(state_at(5.0, 20.0, 0.0, gear=8), params, cfg)
    assert not is_initially_safe(state_at(-0.5, 0.0, 0.0), params, cfg)


# ============================================================
# 5. SAFE-SET GRID AND ROLLOUT ORACLE
# ============================================================

def test_min_lead_speed_examples(cfg):
    assert min_lead_speed(30.0, 10.0, cfg) == 0.0
    assert min_lead_speed(0.0, 0.0, cfg) == 0.0
    assert min_lead_speed(30.0, 20.0, cfg) == pytest.approx(math.sqrt(2.0 / 2.27 * 400.0 - 4.0 * 30.0))


def test_safe_set_grid_layout(cfg, params):
    df = safe_set_grid(cfg, params, (2.0, 32.0), (0.0, 20.0), 3)
    assert list(df.columns) == SAFESET_COLUMNS
    assert len(df) == 9
    cell = df[(df.z_m == 32.0) & (df.v_h_m_s == 10.0)].iloc[0]
    assert cell.region == "region1" and cell.min_lead_speed_m_s == 0.0 and cell.possible_safe
    cell = df[(df.z_m == 32.0) & (df.v_h_m_s == 20.0)].iloc[0]
    assert cell.region == "region2"
    assert cell.min_lead_speed_m_s == pytest.approx(15.2455, abs=1e-3)
    origin = df[(df.z_m == 2.0) & (df.v_h_m_s == 0.0)].iloc[0]
    assert origin.region == "region1" and origin.min_lead_speed_m_s == 0.0


def test_brute_force_trivial_cases(cfg, params):
    assert brute_force_safe(1e4, 0.0, 0.0, params, cfg)
    assert not brute_force_safe(cfg.z0_m, 10.0, 5.0, params, SafetyConfig(a_lead_max_m_s2=2.27))


def test_brute_force_limited_by_brake_capability(cfg, params):
    weak = params.model_copy(update={"max_brake_torque_nm": 5000.0})
    assert max_host_deceleration(weak) < cfg.a_host_max_m_s2
    # 9 m/s needs 17.8 m at 2.27 m/s^2 but 34.4 m at the weak brakes' 1.18 m/s^2
    assert brute_force_safe(cfg.z0_m + 20.0, 9.0, 0.0, params, cfg)
    assert not brute_force_safe(cfg.z0_m + 20.0, 9.0, 0.0, weak, cfg)


def test_grid_agrees_with_rollout_oracle(cfg, params):
    df = safe_set_grid(cfg, params, (cfg.z0_m, cfg.z0_m + 100.0), (0.0, 40.0), 100)
    agree = 0
    for row in df.itertuples():
        v_min = row.min_lead_speed_m_s
        ok = brute_force_safe(row.z_m, row.v_h_m_s, v_min * (1 + 1e-6) + 1e-6, params, cfg, dt=0.005)
        if v_min > 0.05:
            ok = ok and not brute_force_safe(row.z_m, row.v_h_m_s, v_min - 0.05, params, cfg, dt=0.005)
        agree += ok
    assert agree / len(df) >= 0.99
