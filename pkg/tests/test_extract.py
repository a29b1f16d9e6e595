import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from versekit import dsl
from versekit.extract import (
    EvalError, ExtractionError, GuardEnv, TriBool, clip_guard, eval_interval, eval_point,
    extract_transitions,
)
from versekit.geometry import HyperRect, contains
from versekit.maps import builtin_map

from conftest import LOGIC
from oracles import CAR_FIELDS, QUANTIFIED, direct_eval, quantified_program, random_agents, unrolled

M1 = builtin_map("M1")
TB = list(TriBool)


def car_ca():
    return dsl.load_program(LOGIC / "car_ca.vdl", M1.modes, CAR_FIELDS)


# Kleene logic as min/max over FALSE < UNKNOWN < TRUE.
RANK = {TriBool.FALSE: 0, TriBool.UNKNOWN: 1, TriBool.TRUE: 2}


@pytest.mark.parametrize("a,b", list(itertools.product(TB, TB)))
def test_tribool_is_kleene(a, b):
    assert RANK[a & b] == min(RANK[a], RANK[b])
    assert RANK[a | b] == max(RANK[a], RANK[b])
    assert RANK[~a] == 2 - RANK[a]


def test_car_transitions():
    specs, asserts = extract_transitions(car_ca(), 3)
    edges = {(s.src_tactical, s.src_track, s.dst_tactical) for s in specs}
    assert edges == {
        ("Normal", None, "SwitchLeft"), ("Normal", None, "SwitchRight"),
        ("SwitchLeft", "M10", "Normal"), ("SwitchLeft", "M21", "Normal"),
        ("SwitchRight", "M01", "Normal"), ("SwitchRight", "M12", "Normal"),
    }
    assert [a.label for a in asserts] == ["collision"]


def test_fingerprints_ignore_layout_but_not_constants():
    src = (LOGIC / "car_ca.vdl").read_text()
    a = extract_transitions(dsl.check(dsl.parse_source(src), M1.modes, CAR_FIELDS), 2)[0]
    b = extract_transitions(dsl.check(dsl.parse_source("\n\n" + src), M1.modes, CAR_FIELDS), 2)[0]
    c = extract_transitions(
        dsl.check(dsl.parse_source(src.replace("< 5", "< 4.5")), M1.modes, CAR_FIELDS), 2
    )[0]
    assert [s.fingerprint for s in a] == [s.fingerprint for s in b]
    assert a[0].fingerprint != c[0].fingerprint
    assert a[2].fingerprint == c[2].fingerprint


def test_assignment_outside_branch_is_rejected():
    src = quantified_program("ego.x > 0").replace("    return ego", "    ego.x = 1\n    return ego")
    with pytest.raises(ExtractionError) as info:
        extract_transitions(dsl.check(dsl.parse_source(src, "top.vdl"), M1.modes, CAR_FIELDS), 2)
    assert str(info.value).startswith("top.vdl:")


@pytest.mark.parametrize("expr", QUANTIFIED)
@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_unrolling_matches_direct_evaluation(expr, k, rng):
    pred = unrolled(expr, k)
    for _ in range(50):
        states, modes = random_agents(k, rng)
        got = eval_point(pred, GuardEnv(CAR_FIELDS, (0, 1), states, modes, 0, M1.height))
        assert got is TriBool.of(direct_eval(expr, states, modes, M1.height))


def test_unrolled_form_has_no_quantifiers():
    pred = unrolled(QUANTIFIED[5], 3)
    calls = [n for n in dsl.walk(pred) if isinstance(n, dsl.Call)]
    assert all(c.func.id not in ("any", "all") for c in calls)
    assert not any(isinstance(n, dsl.GenExp) for n in dsl.walk(pred))


def test_empty_others_gives_identities():
    assert eval_point(unrolled("any(o.x > 0 for o in others)", 1),
                      GuardEnv(CAR_FIELDS, (0, 1), [[0, 0, 0, 0]], [("Normal", "T0")], 0)) is TriBool.FALSE
    assert eval_point(unrolled("all(o.x > 0 for o in others)", 1),
                      GuardEnv(CAR_FIELDS, (0, 1), [[0, 0, 0, 0]], [("Normal", "T0")], 0)) is TriBool.TRUE


def test_division_by_zero_interval_is_an_error():
    pred = unrolled("ego.x / ego.y > 1", 1)
    env = GuardEnv(CAR_FIELDS, (0, 1), [HyperRect.from_bounds([1, -1, 0, 0], [2, 1, 0, 0])],
                   [("Normal", "T0")], 0)
    with pytest.raises((EvalError, ZeroDivisionError)):
        eval_interval(pred, env)


coord = st.integers(-16, 16).map(lambda i: i / 4)


@st.composite
def scene(draw, k=3):
    rects, points = [], []
    for _ in range(k):
        lo = [draw(coord) for _ in range(4)]
        wid = [draw(st.integers(0, 8)) / 4 for _ in range(4)]
        hi = [a + w for a, w in zip(lo, wid)]
        rects.append(HyperRect.from_bounds(lo, hi))
        points.append([draw(st.floats(a, b)) if b > a else a for a, b in zip(lo, hi)])
    modes = [(draw(st.sampled_from(["Normal", "SwitchLeft"])), draw(st.sampled_from(["T0", "T1", "M10"])))
             for _ in range(k)]
    return rects, points, modes


GUARDS = [s.guard for s in extract_transitions(car_ca(), 3)[0]] + [
    unrolled(e, 3) for e in QUANTIFIED if "tactical_mode" not in e
]


@settings(max_examples=200)
@given(scene(), st.sampled_from(range(len(GUARDS))))
def test_interval_evaluation_encloses_points(sc, g):
    rects, points, modes = sc
    guard = GUARDS[g]
    box = eval_interval(guard, GuardEnv(CAR_FIELDS, (0, 1), rects, modes, 0, M1.height))
    pt = eval_point(guard, GuardEnv(CAR_FIELDS, (0, 1), points, modes, 0, M1.height))
    assert box is TriBool.UNKNOWN or box is pt


@settings(max_examples=200)
@given(scene(), st.sampled_from(range(len(GUARDS))))
def test_clip_guard_keeps_every_satisfying_point(sc, g):
    rects, points, modes = sc
    guard = GUARDS[g]
    env = GuardEnv(CAR_FIELDS, (0, 1), rects, modes, 0, M1.height)
    clipped = clip_guard(rects[0], guard, env)
    if clipped is not None:
        assert contains(rects[0], clipped)
    # The ego point varies over its box; the others stay boxes.
    for p in np.random.default_rng(0).uniform(rects[0].lo, rects[0].hi, size=(20, 4)):
        pe = GuardEnv(CAR_FIELDS, (0, 1), [HyperRect.point(p)] + rects[1:], modes, 0, M1.height)
        if eval_interval(guard, pe) is TriBool.TRUE:
            assert clipped is not None and clipped.contains_point(p, 1e-9)
