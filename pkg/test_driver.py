import math

import numpy as np
import pytest

from powertrain_lab.dynamics import SimState, VehicleParams
from powertrain_lab.driver import (
    CycleKind,
    DriveCycle,
    IdmParams,
    RandomizationSpec,
    count_stops,
    idm_acceleration,
    inject_brake_events,
    lead_state_at,
    limit_deceleration,
    load_drive_cycle_csv,
    randomize_episode,
    synthesize_cycle,
)
from powertrain_lab.errors import ConfigError, InitSamplingExhausted, OutOfRange
from powertrain_lab.safety import FilterKind, SafetyConfig, is_initially_safe


@pytest.fixture
def ramp():
    return DriveCycle([0.0, 10.0], [0.0, 20.0], name="ramp")


def follower(v, v_l, z):
    return SimState(separation_m=z, host_speed_m_s=v, lead_speed_m_s=v_l, gear_index=5)


# ============================================================
# 1. DRIVE CYCLES
# ============================================================

def test_lead_state_mid_segment(ramp):
    speed, accel = lead_state_at(ramp, 5.0)
    assert speed == pytest.approx(10.0)
    assert accel == pytest.approx(2.0)


def test_lead_state_on_samples():
    cycle = DriveCycle([0.0, 10.0, 20.0], [0.0, 10.0, 10.0])
    assert lead_state_at(cycle, 0.0) == pytest.approx((0.0, 1.0))
    assert lead_state_at(cycle, 10.0) == pytest.approx((10.0, 0.5))
    assert lead_state_at(cycle, 20.0) == pytest.approx((10.0, 0.0))


def test_lead_state_forward_difference():
    cycle = DriveCycle([0.0, 10.0, 20.0], [0.0, 10.0, 10.0])
    assert lead_state_at(cycle, 5.0, forward_dt_s=0.1) == pytest.approx((5.0, 1.0))
    # straddles the corner: one half-step up the ramp, the rest flat
    assert lead_state_at(cycle, 9.95, forward_dt_s=0.1) == pytest.approx((9.95, 0.5))
    assert lead_state_at(cycle, 20.0, forward_dt_s=0.1) == pytest.approx((10.0, 0.0))


def test_forward_difference_replays_cycle():
    cycle = synthesize_cycle(CycleKind.URBAN, 120.0, seed=3)
    dt, speed = 0.1, cycle.speed_at(0.0)
    for k in range(1000):
        _, accel = lead_state_at(cycle, k * dt, forward_dt_s=dt)
        speed += accel * dt
        assert speed == pytest.approx(cycle.speed_at(min((k + 1) * dt, cycle.duration_s)), abs=1e-9)


@pytest.mark.parametrize("dt", [0.0, -0.1])
def test_forward_difference_needs_positive_step(ramp, dt):
    with pytest.raises(ValueError):
        lead_state_at(ramp, 1.0, forward_dt_s=dt)


@pytest.mark.parametrize("t", [-0.1, 10.5])
def test_lead_state_outside_cycle(ramp, t):
    with pytest.raises(OutOfRange):
        lead_state_at(ramp, t)


@pytest.mark.parametrize(
    "times, speeds",
    [
        ([0.0], [1.0]),
        ([1.0, 2.0], [1.0, 1.0]),
        ([0.0, 2.0, 1.0], [1.0, 1.0, 1.0]),
        ([0.0, 1.0], [1.0, -1.0]),
        ([0.0, 1.0], [1.0, math.nan]),
    ],
)
def test_invalid_cycle_rejected(times, speeds):
    with pytest.raises(ValueError):
        DriveCycle(times, speeds)


def test_cycle_arrays_read_only(ramp):
    with pytest.raises(ValueError):
        ramp.speeds_m_s[0] = 3.0


@pytest.mark.parametrize("kind", list(CycleKind))
def test_synthesis_deterministic(kind):
    a = synthesize_cycle(kind, 600.0, seed=7)
    b = synthesize_cycle(kind, 600.0, seed=7)
    assert a.equals(b)
    assert a.duration_s == pytest.approx(600.0)
    assert np.all(a.speeds_m_s >= 0.0)


def test_sawtooth_ramps():
    cycle = synthesize_cycle(CycleKind.SAWTOOTH, 90.0)
    for t, expected in [(0.0, 0.0), (7.0, 7.0), (15.0, 15.0), (30.0, 0.0), (45.0, 15.0)]:
        assert cycle.speed_at(t) == pytest.approx(expected)
    assert count_stops(cycle) == 3


def test_urban_cycle_stops_often():
    cycle = synthesize_cycle(CycleKind.URBAN, 600.0, seed=3)
    assert count_stops(cycle) >= 4
    assert cycle.speeds_m_s.max() <= 25.0


def test_highway_speed_cap():
    cycle = synthesize_cycle(CycleKind.HIGHWAY, 900.0, seed=3)
    assert cycle.speeds_m_s.max() <= 35.0
    assert count_stops(cycle) == 0


def test_seed_changes_cycle():
    a = synthesize_cycle(CycleKind.URBAN, 300.0, seed=1)
    b = synthesize_cycle(CycleKind.URBAN, 300.0, seed=2)
    assert not a.equals(b)


def test_cycle_csv(tmp_path, ramp):
    path = tmp_path / "cycle.csv"
    ramp.to_frame().to_csv(path, index=False)
    loaded = load_drive_cycle_csv(str(path), name="ramp")
    assert loaded.equals(ramp)


def test_cycle_csv_missing_column(tmp_path):
    path = tmp_path / "cycle.csv"
    path.write_text("time_s,velocity\n0,0\n1,1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_drive_cycle_csv(str(path))


# ============================================================
# 2. IDM
# ============================================================

def test_idm_at_desired_gap():
    # s* = 2 + 15 * 1.5 = 24.5, so only the free-road term remains
    assert idm_acceleration(follower(15.0, 15.0, 24.5), IdmParams()) == pytest.approx(-0.09375)


def test_idm_from_rest_on_open_road():
    assert idm_acceleration(follower(0.0, 0.0, 1e6), IdmParams(), lead_present=False) == pytest.approx(1.5)


def test_idm_at_desired_speed_without_lead():
    assert idm_acceleration(follower(30.0, 0.0, 1.0), IdmParams(), lead_present=False) == pytest.approx(0.0)


def test_idm_clamped():
    p = IdmParams()
    assert idm_acceleration(follower(25.0, 0.0, 0.0), p) == -4.0
    fast = IdmParams(max_accel_m_s2=5.0)
    assert idm_acceleration(follower(0.0, 0.0, 1e6), fast, lead_present=False) == 3.0


def test_idm_closing_speed_brakes_harder():
    p = IdmParams()
    closing = idm_acceleration(follower(15.0, 10.0, 30.0), p)
    opening = idm_acceleration(follower(15.0, 20.0, 30.0), p)
    assert closing < opening


# ============================================================
# 3. RANDOMIZATION
# ============================================================

@pytest.fixture
def base():
    return synthesize_cycle(CycleKind.URBAN, 300.0, seed=0)


def test_zero_noise_keeps_cycle(base):
    spec = RandomizationSpec(speed_noise_std_m_s=0.0, brake_events_per_episode=0)
    setup = randomize_episode(spec, base, 4)
    assert setup.cycle.equals(base)


def test_episode_is_pure_function_of_seed_and_index(base):
    spec = RandomizationSpec(seed=11)
    a = randomize_episode(spec, base, 5)
    b = randomize_episode(spec, base, 5)
    assert a.cycle.equals(b.cycle)
    assert a.initial_state == b.initial_state
    assert a.vehicle_overrides == b.vehicle_overrides
    assert a.idm == b.idm
    c = randomize_episode(spec, base, 6)
    assert a.initial_state != c.initial_state


@pytest.mark.parametrize("kind", [FilterKind.HOCBF, FilterKind.ECBF])
def test_initial_states_admissible(base, kind):
    spec = RandomizationSpec(seed=2)
    vehicle = VehicleParams()
    safety = SafetyConfig()
    for idx in range(100):
        setup = randomize_episode(spec, base, idx, vehicle, safety, filter_kind=kind)
        params = vehicle.model_copy(update=setup.vehicle_overrides)
        assert is_initially_safe(setup.initial_state, params, safety, kind)
        assert spec.mass_range_kg[0] <= params.mass_kg <= spec.mass_range_kg[1]


def test_perturbed_cycle_respects_lead_decel(base):
    safety = SafetyConfig()
    spec = RandomizationSpec(speed_noise_std_m_s=2.0, brake_events_per_episode=3)
    for idx in range(10):
        cycle = randomize_episode(spec, base, idx, safety=safety).cycle
        slopes = np.diff(cycle.speeds_m_s) / np.diff(cycle.times_s)
        assert slopes.min() >= -safety.a_lead_max_m_s2 - 1e-9
        assert cycle.speeds_m_s.min() >= 0.0


def test_limit_deceleration():
    cycle = DriveCycle([0.0, 1.0, 2.0], [20.0, 0.0, 0.0])
    limited = limit_deceleration(cycle, 2.0)
    np.testing.assert_allclose(limited.speeds_m_s, [20.0, 18.0, 16.0])


def test_brake_event_stops_lead():
    cycle = synthesize_cycle(CycleKind.HIGHWAY, 600.0, seed=1)
    braked = inject_brake_events(cycle, 1, 2.0, np.random.default_rng(0))
    later = braked.times_s >= 60.0
    assert np.any(braked.speeds_m_s[later] == 0.0)
    slopes = np.diff(braked.speeds_m_s) / np.diff(braked.times_s)
    assert slopes.min() == pytest.approx(-2.0)
    assert np.all(braked.speeds_m_s <= cycle.speeds_m_s + 1e-12)


def test_sampling_exhaustion_reported(base):
    # Host at 40 m/s with a 1 m gap cannot stop behind a braking lead.
    spec = RandomizationSpec(
        initial_gap_range_m=(1.0, 1.0),
        initial_host_speed_range_m_s=(40.0, 40.0),
        speed_noise_std_m_s=0.0,
    )
    with pytest.raises(InitSamplingExhausted):
        randomize_episode(spec, base, 0)


def test_unordered_range_rejected():
    with pytest.raises(ValueError):
        RandomizationSpec(initial_gap_range_m=(80.0, 20.0))
