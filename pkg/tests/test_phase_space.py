"""Pendulum closed forms checked against numerical integration and brute force."""

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from pushrecovery.phase_space import (
    Keyframe, NoApexCrossing, NoSwitchPoint, OutOfRange, PhaseState, PipmParams, RiemannianCell, Stance,
    all_keyframes, choose_step_length, classify_axis, classify_lateral, is_steady_state, lateral_center,
    lateral_foot_placement, lateral_offset, lipm_flow, next_lateral_keyframe, nominal_gait, orbital_energy,
    plan_step, position_guard_recalc, solve_ows_timing, time_of_flight,
)

P = PipmParams()


def ode_flow(state, foot, t, params=P, **kw):
    w2 = params.omega ** 2
    sol = solve_ivp(lambda _, y: [y[1], w2 * (y[0] - foot)], (0.0, t), [state.p, state.v],
                    rtol=1e-12, atol=1e-13, method="DOP853", **kw)
    return sol


def ode_crossing_velocity(state, foot, params=P):
    """Velocity when the integrated CoM passes over ``foot``."""
    def over(_, y):
        return y[0] - foot
    over.terminal, over.direction = True, 1
    sol = ode_flow(state, foot, 20.0, params, events=over)
    assert sol.t_events[0].size == 1
    return sol.y_events[0][0][1]


def test_flow_matches_integration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = PhaseState(rng.uniform(-0.2, 0.2), rng.uniform(-0.8, 0.8))
        foot, t = rng.uniform(-0.1, 0.1), rng.uniform(0.0, 0.5)
        sol = ode_flow(s, foot, t)
        got = lipm_flow(s, foot, t, P)
        assert abs(got.p - sol.y[0, -1]) < 1e-9 and abs(got.v - sol.y[1, -1]) < 1e-9


def test_flow_conserves_orbital_energy():
    s = PhaseState(0.05, 0.4)
    e0 = orbital_energy(s, 0.0, P)
    for t in (0.1, 0.3, 0.7):
        assert orbital_energy(lipm_flow(s, 0.0, t, P), 0.0, P) == pytest.approx(e0, abs=1e-12)


def test_lateral_placement_example_stops_at_t2():
    sw = PhaseState(0.05, 0.3)
    foot = lateral_foot_placement(sw, 0.2, P)
    w = P.omega
    closed = 0.05 + (math.exp(2 * w * 0.2) + 1) * 0.3 / ((math.exp(2 * w * 0.2) - 1) * w)
    assert foot == pytest.approx(closed, abs=1e-15)
    sol = ode_flow(sw, foot, 0.2)
    assert abs(sol.y[1, -1]) < 1e-9


def test_lateral_placement_random_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        sw = PhaseState(rng.uniform(-0.3, 0.3), rng.uniform(-1.0, 1.0))
        t2 = rng.uniform(0.05, 0.4)
        foot = lateral_foot_placement(sw, t2, P)
        assert abs(ode_flow(sw, foot, t2).y[1, -1]) < 1e-9


def test_lateral_placement_velocity_target():
    sw = PhaseState(0.02, 0.2)
    foot = lateral_foot_placement(sw, 0.25, P, v_target=-0.1)
    assert lipm_flow(sw, foot, 0.25, P).v == pytest.approx(-0.1, abs=1e-12)


def test_lateral_placement_zero_duration():
    assert lateral_foot_placement(PhaseState(0.1, 0.0), 0.0, P) == 0.1
    with pytest.raises(ValueError):
        lateral_foot_placement(PhaseState(0.1, 0.2), 0.0, P)
    with pytest.raises(ValueError):
        lateral_foot_placement(PhaseState(0.1, 0.2), -0.1, P)


def test_position_guard_example():
    s = PhaseState(-0.05, 0.55)
    apex = position_guard_recalc(s, 0.0, P)
    assert apex.v == pytest.approx(math.sqrt(0.55 ** 2 - P.omega ** 2 * 0.05 ** 2), abs=1e-12)
    assert abs(apex.v - ode_crossing_velocity(s, 0.0)) < 1e-6


def test_position_guard_random_oracle():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        d = rng.uniform(-0.2, 0.2)
        v = math.sqrt(P.omega ** 2 * d * d + rng.uniform(0.01, 0.6))
        s = PhaseState(d, v)
        if d > 0:
            # past the foot already: the apex lies behind, integrate backwards
            back = PhaseState(-d, v)
            assert position_guard_recalc(s, 0.0, P).v == pytest.approx(ode_crossing_velocity(back, 0.0), abs=1e-6)
        else:
            assert abs(position_guard_recalc(s, 0.0, P).v - ode_crossing_velocity(s, 0.0)) < 1e-6


def test_position_guard_fixed_point():
    for v in (0.25, 0.5, 0.75):
        assert position_guard_recalc(PhaseState(0.0, v), 0.0, P).v == pytest.approx(v, abs=1e-12)
    apex = PhaseState(0.0, 0.5)
    on_orbit = lipm_flow(apex, 0.0, -0.15, P)
    assert position_guard_recalc(on_orbit, 0.0, P).v == pytest.approx(0.5, abs=1e-12)


def test_position_guard_rejects_non_crossing():
    with pytest.raises(NoApexCrossing):
        position_guard_recalc(PhaseState(-0.2, 0.1), 0.0, P)
    with pytest.raises(NoApexCrossing):
        position_guard_recalc(PhaseState(-0.1, -0.3), 0.0, P)


def test_time_of_flight_matches_bisection():
    start = PhaseState(-0.1, 0.6)
    for t in (0.05, 0.2, 0.35):
        end = lipm_flow(start, 0.0, t, P)
        assert time_of_flight(start, end, 0.0, P) == pytest.approx(t, abs=1e-12)
    # zero-energy-like case where the log form degenerates
    start = PhaseState(-0.1, P.omega * 0.1)
    end = lipm_flow(start, 0.0, 0.2, P)
    assert time_of_flight(start, end, 0.0, P) == pytest.approx(0.2, abs=1e-9)


def test_ows_timing_consistency():
    apex = PhaseState(0.0, 0.5)
    timing = solve_ows_timing(apex, apex, 0.0, 0.25, P)
    sw = lipm_flow(apex, 0.0, timing.t1, P)
    assert sw.p == pytest.approx(timing.switch_state.p, abs=1e-12)
    assert sw.v == pytest.approx(timing.switch_state.v, abs=1e-12)
    end = lipm_flow(sw, 0.25, timing.t2, P)
    assert end.p == pytest.approx(0.25, abs=1e-9) and end.v == pytest.approx(0.5, abs=1e-9)
    # symmetric keyframes switch halfway
    assert timing.t1 == pytest.approx(timing.t2, abs=1e-12)
    assert timing.switch_state.p == pytest.approx(0.125, abs=1e-12)


def test_ows_timing_brute_force_switch():
    a, b = PhaseState(0.0, 0.5), PhaseState(0.0, 0.3)
    timing = solve_ows_timing(a, b, 0.0, 0.35, P)
    xs = np.linspace(0.0, 0.35, 35001)
    # velocity squared along each apex orbit
    e1 = a.v ** 2 + P.omega ** 2 * xs ** 2
    e2 = b.v ** 2 + P.omega ** 2 * (xs - 0.35) ** 2
    brute = xs[np.argmin(np.abs(e1 - e2))]
    assert abs(brute - timing.switch_state.p) < 1e-5


def test_ows_timing_degenerate():
    apex = PhaseState(0.0, 0.5)
    with pytest.raises(NoSwitchPoint):
        solve_ows_timing(apex, apex, 0.0, 0.0, P)
    with pytest.raises(NoSwitchPoint):
        solve_ows_timing(PhaseState(0.0, 0.0), PhaseState(0.0, 0.5), 0.0, 0.25, P)


def test_step_length_keeps_swing_time():
    slow, fast = PhaseState(0.0, 0.25), PhaseState(0.0, 0.75)
    i = choose_step_length(fast, slow, P)
    t = solve_ows_timing(fast, slow, 0.0, P.step_lengths[i], P)
    assert min(t.t1, t.t2) >= P.min_phase_time
    assert choose_step_length(PhaseState(0.0, 0.5), PhaseState(0.0, 0.5), P) == 0


def test_steady_state_set():
    ks = list(all_keyframes())
    steady = [k for k in ks if is_steady_state(k)]
    assert len(steady) == 24
    assert all(k.sag.pos == 0 and k.lat.vel == 0 for k in steady)
    k = Keyframe(RiemannianCell(0, 0), RiemannianCell(0, 1), Stance.RIGHT)
    assert not is_steady_state(k)


def test_classification_boundaries():
    assert classify_axis(PhaseState(0.0, 0.5), P) == RiemannianCell(0, 2)
    assert classify_axis(PhaseState(0.06, 0.62), P) == RiemannianCell(1, 2)
    assert classify_axis(PhaseState(-0.06, 0.63), P) == RiemannianCell(-1, 3)
    assert classify_axis(PhaseState(0.0, -0.3), P, signed=True) == RiemannianCell(0, -1)
    with pytest.raises(OutOfRange):
        classify_axis(PhaseState(0.0, P.v_max + 1e-9), P)


def test_lateral_center_roundtrip():
    for cell in (RiemannianCell(p, v) for p in (-1, 0, 1) for v in range(-3, 4)):
        assert classify_lateral(lateral_center(cell, P), P) == cell


def test_nominal_gait_is_periodic():
    idx, timing, offset = nominal_gait(P)
    lat = PhaseState(offset, 0.0)
    apex, foot = next_lateral_keyframe(timing, lat, 0.0, P)
    assert apex.v == pytest.approx(0.0, abs=1e-12)
    assert foot == pytest.approx(P.step_widths[1], abs=1e-12)
    assert foot - apex.p == pytest.approx(offset, abs=1e-12)
    assert offset == pytest.approx(lateral_offset(P))


def test_next_lateral_keyframe_oracle():
    apex = PhaseState(0.0, 0.5)
    timing = solve_ows_timing(apex, apex, 0.0, 0.25, P)
    lat = PhaseState(0.02, 0.15)
    out, foot = next_lateral_keyframe(timing, lat, 0.0, P)
    sw = ode_flow(lat, 0.0, timing.t1).y[:, -1]
    end = ode_flow(PhaseState(*sw), foot, timing.t2).y[:, -1]
    assert abs(out.p - end[0]) < 1e-6 and abs(end[1]) < 1e-9


def test_mirror_symmetric_placement():
    apex = PhaseState(0.0, 0.5)
    timing = solve_ows_timing(apex, apex, 0.0, 0.25, P)
    _, f1 = next_lateral_keyframe(timing, PhaseState(0.0, 0.1), 0.0, P)
    _, f2 = next_lateral_keyframe(timing, PhaseState(0.0, -0.1), 0.0, P)
    assert f1 == pytest.approx(-f2, abs=1e-15)


def test_plan_step_frames():
    sag = PhaseState(0.0, 0.5)
    lat = PhaseState(lateral_offset(P), 0.0)
    plan = plan_step(sag, lat, sag, 0.25, P.step_widths[1], P)
    assert plan.lat_next.p == pytest.approx(lateral_offset(P), abs=1e-12)
    assert plan.lat_next.v == pytest.approx(0.0, abs=1e-12)
    assert not plan.crossed


def test_params_validation():
    with pytest.raises(ValueError):
        PipmParams(v_centers=(0.1, 0.25, 0.5, 0.75))
    with pytest.raises(ValueError):
        PipmParams(p_centers=(-0.1, 0.0, 0.2))
    with pytest.raises(ValueError):
        PipmParams(g=0.0)
