import pytest
from hypothesis import given, strategies as st

from versekit.geometry import HyperRect, contains
from versekit.sensor import SensorDef

POS = (0, 1)
NOISY = SensorDef.from_config({"kind": "noisy", "position_noise": 0.5}, 2)


@st.composite
def rects(draw, k=3):
    out = []
    for _ in range(k):
        lo = [draw(st.floats(-50, 50)) for _ in range(4)]
        out.append(HyperRect.from_bounds(lo, [a + draw(st.floats(0, 5)) for a in lo]))
    return out


def test_noisy_bloats_other_positions():
    rs = [HyperRect.point([0, 0, 0, 1]), HyperRect.point([10, 0, 0, 1])]
    seen = NOISY.observe_sets(0, rs, POS)
    assert seen[0] == rs[0]
    assert seen[1] == HyperRect.from_bounds([9.5, -0.5, 0, 1], [10.5, 0.5, 0, 1])


def test_point_observation_is_identity():
    xs = [[0.0, 1.0, 0.0, 1.0], [2.0, 3.0, 0.0, 1.0]]
    assert NOISY.observe(0, xs) == SensorDef().observe(0, xs) == xs


def test_zero_noise_is_identity():
    s = SensorDef.from_config({"kind": "noisy", "position_noise": 0.0}, 2)
    rs = [HyperRect.point([0, 0, 0, 1]), HyperRect.point([1, 1, 0, 1])]
    assert s.observe_sets(0, rs, POS) == rs


@given(rects(), st.integers(0, 2))
def test_monotone_and_transparent(rs, ego):
    seen = NOISY.observe_sets(ego, rs, POS)
    assert all(contains(b, a) for a, b in zip(rs, seen))
    assert seen[ego] == rs[ego]
    assert SensorDef().observe_sets(ego, rs, POS) == rs


def test_single_agent_unchanged():
    r = [HyperRect.from_bounds([0, 0, 0, 0], [1, 1, 1, 1])]
    assert NOISY.observe_sets(0, r, POS) == r


def test_config_round_trip_and_errors():
    assert SensorDef.from_config(NOISY.to_config(), 2) == NOISY
    assert SensorDef.from_config(None, 3) == SensorDef()
    with pytest.raises(ValueError):
        SensorDef("fuzzy")
    with pytest.raises(ValueError):
        SensorDef("noisy", (-1.0, 0.0))
    with pytest.raises(ValueError):
        NOISY.observe_sets(0, [HyperRect.point([0] * 6)] * 2, (0, 1, 2))
