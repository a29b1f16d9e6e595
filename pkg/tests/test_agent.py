import math

import numpy as np
import pytest

from versekit.agent import (
    AGENT_TYPES, CarParams, DroneParams, FlowError, ModePair, car_derivative, drone_acceleration,
    flow, flow_batch, stanley_steering,
)
from versekit.maps import builtin_map

CAR, DRONE = AGENT_TYPES["car"], AGENT_TYPES["drone"]
M1, M5 = builtin_map("M1"), builtin_map("M5")
KEEP = ModePair("Normal", "T1")


def test_car_derivative_straight():
    d = car_derivative(np.array([0.0, 0.0, 0.0, 1.0]), 0.0, 1.0)
    assert d[:3] == pytest.approx([1.0, 0.0, 0.0])


def test_stanley_fixed_point_and_value():
    assert stanley_steering(0.0, 0.0, 1.0, 0.45, 0.1) == 0.0
    assert stanley_steering(0.0, 1.0, 1.0, 1.0, 0.0) == pytest.approx(math.pi / 4)
    assert stanley_steering(0.0, 100.0, 1.0, 1.0, 0.0, math.radians(30)) == pytest.approx(math.radians(30))


def test_drone_acceleration_cases():
    z = np.zeros(3)
    assert drone_acceleration(z, z, z, z) == pytest.approx(z)
    a = drone_acceleration(np.array([0, 0, 1.0]), z, z, z, DroneParams(k_p=2, k_d=3, a_max=1e9))
    assert a == pytest.approx([0, 0, -2.0])
    big = drone_acceleration(np.array([5.0, 0, 0]), z, z, z, DroneParams(k_p=2, a_max=5))
    assert np.linalg.norm(big) == pytest.approx(5.0)


def test_car_at_rest_stays():
    tr = flow(CAR, [0, 0, 0, 0], KEEP, M1, 5.0, params=CarParams(speed=0.0))
    assert np.all(tr.states == tr.states[0])


def test_car_converges_to_lane():
    tr = flow(CAR, [0, 1, 0, 1], KEEP, M1, 10.0)
    y = np.abs(tr.states[:, 1])
    assert y[-1] < 0.1
    first = int(np.argmax(y < 0.1))
    assert np.all(np.diff(y[: first + 1]) <= 1e-12)


def test_drone_reaches_upper_layer():
    p = M5.lane("T1").at(np.array([0.0]))[0]
    tr = flow(DRONE, list(p) + [1, 0, 0], ModePair("MoveUp", "M10"), M5, 5.0)
    gap = np.abs(tr.states[:, 2] - M5.height("T0"))
    assert gap.min() < 0.05 and gap[-1] < 0.05


def test_rk4_step_halving():
    a = flow(CAR, [0, 1, 0, 1], KEEP, M1, 10.0, 0.05).states[-1]
    b = flow(CAR, [0, 1, 0, 1], KEEP, M1, 10.0, 0.025).states[-1]
    assert np.abs(a - b).max() < 1e-4


def test_flow_is_deterministic_and_local():
    x0 = [0, 0.5, 0.1, 1]
    a = flow(CAR, x0, KEEP, M1, 3.0).states
    flow(CAR, [5, -3, 0, 0.5], ModePair("SwitchLeft", "M21"), M1, 3.0)
    flow(DRONE, [0, 0, 2, 1, 0, 0], KEEP, M5, 3.0)
    b = flow(CAR, x0, KEEP, M1, 3.0).states
    assert np.array_equal(a, b)


def test_batch_matches_single_runs():
    x0 = np.array([[0, 0.5, 0.1, 1], [3, -0.4, 0, 0.8]])
    batch = flow_batch(CAR, x0, KEEP, M1, 2.0)
    for i in range(2):
        assert np.allclose(batch[:, i], flow(CAR, x0[i], KEEP, M1, 2.0).states, atol=1e-12)


@pytest.mark.parametrize("duration,dt", [(1.0, 0.3), (0.0, 0.05), (1.0, 2.0), (-1.0, 0.1)])
def test_bad_step_sizes(duration, dt):
    with pytest.raises(FlowError):
        flow(CAR, [0, 0, 0, 1], KEEP, M1, duration, dt)
