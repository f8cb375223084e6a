import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import march
from uavfusion.world import (ATTITUDE_TAU, AttitudeCommand, Box, MissionTimeExceeded, VehicleState,
                             VirtualClock, WorldModel, WorldParseError, WorldValidationError, default_world,
                             load_world, make_bounds, raycast, step_dynamics)


def _doc(**kw):
    doc = {"schema": 1, "bounds": [7.0, 7.0, 5.0], "cell_size": 0.05, "obstacles": []}
    doc.update(kw)
    return json.dumps(doc)


def test_load_empty_world():
    w = load_world(_doc())
    assert w.obstacles == ()
    assert np.allclose(w.bounds.extent, [7.0, 7.0, 5.0])


def test_load_rejects_obstacle_outside_bounds():
    with pytest.raises(WorldValidationError):
        load_world(_doc(obstacles=[{"min": [6.5, 1, -1], "max": [7.5, 2, 0]}]))


def test_load_rejects_flat_bounds():
    with pytest.raises(WorldValidationError):
        load_world(_doc(bounds=[7, 7, 0]))


def test_load_rejects_bad_cell_size():
    with pytest.raises(WorldValidationError):
        load_world(_doc(cell_size=0))


@pytest.mark.parametrize("text", ["{", "[]", '{"schema": 2}', '{"obstacles": [{"min": [0, 0]}]}',
                                  '{"bounds": [1, 2]}'])
def test_load_parse_errors(text):
    with pytest.raises(WorldParseError):
        load_world(text)


def test_document_round_trip():
    w = default_world()
    again = load_world(json.dumps(w.to_document()))
    assert again.to_document() == w.to_document()


def test_default_world_layout():
    w = default_world()
    assert len(w.obstacles) == 4
    assert w.is_free([0.9, 0.9, -1.2])
    assert not w.is_free([2.3, 2.3, -1.2])


def test_raycast_perpendicular_wall():
    w = WorldModel(make_bounds([7, 7, 5]))
    assert raycast(w, [2.0, 3.5, -1.0], [1.0, 0.0, 0.0], 10.0) == pytest.approx(5.0, abs=1e-12)


def test_raycast_miss_beyond_range():
    w = WorldModel(make_bounds([14, 14, 5]))
    assert raycast(w, [2.0, 7.0, -1.0], [1.0, 0.0, 0.0], 10.0) is None


def test_raycast_matches_marching_oracle():
    w = default_world()
    rng = np.random.default_rng(7)
    for _ in range(100):
        while True:
            o = rng.uniform(w.bounds.lo, w.bounds.hi)
            if w.is_free(o, 1e-3):
                break
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        got = raycast(w, o, d, 10.0)
        want = march(w, o, d, 10.0)
        if math.isinf(want):
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-9)


def test_raycast_symmetry_through_box():
    box = Box([3.0, 3.0, -2.0], [4.0, 4.0, 0.0])
    w = WorldModel(make_bounds([7, 7, 5]), (box,))
    a = np.array([1.0, 3.2, -1.0])
    b = np.array([6.0, 3.7, -1.0])
    ab = np.linalg.norm(b - a)
    d = (b - a) / ab
    t_ab = raycast(w, a, d, 10.0)
    t_ba = raycast(w, b, -d, 10.0)
    chord = ab * (1.0 / 5.0)                    # the box spans one fifth of the x travel
    assert t_ab + t_ba == pytest.approx(ab - chord, abs=1e-12)


def test_equilibrium_is_fixed_point():
    s = VehicleState(position=np.array([1.0, 1.0, -1.2]), attitude=np.array([0.0, 0.0, 0.3]))
    out = step_dynamics(s, AttitudeCommand(yaw=0.3), 0.001)
    assert np.array_equal(out.position, s.position)
    assert np.array_equal(out.attitude, s.attitude)
    assert np.array_equal(out.velocity, np.zeros(3))


def test_constant_yaw_rate_follows_first_order_lag():
    # Commanded yaw ramps at r; a first-order lag lags the ramp by r * tau.
    r, dt, T = 0.5, 0.001, 3.0
    s = VehicleState()
    n = int(round(T / dt))
    for k in range(n):
        s = step_dynamics(s, AttitudeCommand(yaw=r * (k + 1) * dt), dt)
    tau = ATTITUDE_TAU
    # Exact discrete response to a staircase ramp held over each step.
    a = math.exp(-dt / tau)
    expected = r * dt * sum((k + 1) * (1 - a) * a ** (n - 1 - k) for k in range(n))
    assert s.yaw == pytest.approx(expected, abs=1e-9)
    assert s.yaw == pytest.approx(r * T - r * tau, abs=2e-3)


def test_step_into_obstacle_sets_contact():
    box = Box([3.0, 0.0, -5.0], [4.0, 7.0, 0.0])
    w = WorldModel(make_bounds([7, 7, 5]), (box,))
    s = VehicleState(position=np.array([2.95, 3.0, -1.0]), velocity=np.array([1.0, 0.0, 0.0]))
    cmd = AttitudeCommand(velocity_ne=(1.0, 0.0))
    for _ in range(200):
        s = step_dynamics(s, cmd, 0.001, w)
        if s.contact:
            break
    assert s.contact
    assert s.position[0] == pytest.approx(3.0, abs=1e-8)
    assert s.position[0] < 3.0


@given(st.floats(-3.0, 3.0), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5),
       st.floats(1e-3, 0.05), st.floats(-1.0, 1.0))
def test_two_half_steps_equal_one_step(yaw, roll, pitch, dt, v):
    s = VehicleState(position=np.array([1.0, 2.0, -1.0]), attitude=np.array([0.1, -0.1, 0.2]))
    cmd = AttitudeCommand(roll=roll, pitch=pitch, yaw=yaw, velocity_ne=(v, -v))
    one = step_dynamics(s, cmd, dt)
    two = step_dynamics(step_dynamics(s, cmd, dt / 2), cmd, dt / 2)
    assert np.allclose(one.position, two.position, atol=1e-12)
    assert np.allclose(one.velocity, two.velocity, atol=1e-12)
    assert np.allclose(one.attitude, two.attitude, atol=1e-12)


@given(st.floats(-20.0, 20.0), st.floats(-20.0, 20.0))
def test_yaw_normalised_after_step(yaw0, cmd_yaw):
    s = VehicleState(attitude=np.array([0.0, 0.0, yaw0]))
    out = step_dynamics(s, AttitudeCommand(yaw=cmd_yaw), 0.01)
    assert -math.pi <= out.yaw < math.pi


def test_dynamics_deterministic():
    def run():
        s = VehicleState()
        for k in range(500):
            s = step_dynamics(s, AttitudeCommand(roll=0.1, yaw=0.01 * k, velocity_ne=(0.5, 0.2)), 0.001)
        return s
    a, b = run(), run()
    assert a.position.tobytes() == b.position.tobytes()
    assert a.attitude.tobytes() == b.attitude.tobytes()


def test_clock_ticks_and_limit():
    c = VirtualClock(tick=0.001, mission_limit=1.0)
    c.advance_to(250)
    assert c.now == 0.25
    with pytest.raises(ValueError):
        c.advance_to(100)
    with pytest.raises(MissionTimeExceeded):
        c.advance_to(1001)
    c.advance_to(1000)
    assert c.expired
