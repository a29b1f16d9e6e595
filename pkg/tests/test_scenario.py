import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from versekit import dsl
from versekit.agent import AGENT_TYPES, AgentDef, ModePair
from versekit.extract import TriBool
from versekit.geometry import HyperRect
from versekit.maps import builtin_map
from versekit.scenario import Scenario, ScenarioError, build_automaton, load_scenario, scenario_from_config

from conftest import LOGIC, SCENARIOS

CAR, DRONE = AGENT_TYPES["car"], AGENT_TYPES["drone"]
M1, M5, M6 = builtin_map("M1"), builtin_map("M5"), builtin_map("M6")


def drone(i, logic="drone_ca.vdl", map_=M6, rect=None):
    prog = dsl.load_program(LOGIC / logic, map_.modes, DRONE.fields)
    rect = rect or HyperRect.from_bounds([0, -0.05, 2, 1, 0, 0], [0, 0.05, 2, 1, 0, 0])
    return AgentDef(f"drone{i}", DRONE, prog, rect, ModePair("Normal", "T1"))


def test_add_agent_and_duplicates():
    sc = Scenario(M6)
    sc.add_agent(drone(1))
    sc.add_agent(drone(2, rect=HyperRect.point([1, 0, 2, 1, 0, 0])))
    assert sc.k == 2 and sc.validate() == []
    with pytest.raises(ScenarioError, match="duplicate"):
        sc.add_agent(drone(1))


def test_mixed_state_spaces_rejected():
    sc = Scenario(M6)
    sc.add_agent(drone(1))
    sc.add_agent(AgentDef("car", CAR, None, HyperRect.point([0, 0, 0, 1]), ModePair("Normal", "T1")))
    assert any("state space" in p for p in sc.validate())


def test_missing_track_mode_names_the_triple():
    prog = dsl.load_program(LOGIC / "car_ca.vdl", M5.modes, CAR.fields)
    sc = Scenario(M5)
    sc.add_agent(AgentDef("car", CAR, prog, HyperRect.point([0, 0, 0, 1]), ModePair("Normal", "T1")))
    sc.add_agent(AgentDef("car2", CAR, None, HyperRect.point([3, 0, 0, 1]), ModePair("Normal", "T1")))
    problems = sc.validate()
    assert any("(T1, Normal, SwitchLeft)" in p for p in problems)


def test_no_transitions_gives_empty_candidates():
    sc = Scenario(M6)
    sc.add_agent(drone(1, "drone_npv.vdl"))
    aut = build_automaton(sc)
    assert aut.candidates(aut.initial_modes) == []


def test_m6_four_single_switch_successors():
    aut = build_automaton(load_scenario(SCENARIOS / "drone2_m6.json"))
    cands = aut.candidates(aut.initial_modes)
    succ = sorted((jt.agent, str(aut.next_modes(jt, aut.initial_modes)[jt.agent])) for jt in cands)
    assert succ == [(0, "MoveDown/M12"), (0, "MoveUp/M10"), (1, "MoveDown/M12"), (1, "MoveUp/M10")]
    for jt in cands:
        nxt = aut.next_modes(jt, aut.initial_modes)
        assert sum(a != b for a, b in zip(nxt, aut.initial_modes)) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=12, max_size=12))
def test_reset_is_local(xs):
    aut = build_automaton(load_scenario(SCENARIOS / "drone2_m6.json"))
    states = [xs[:6], xs[6:]]
    for jt in aut.candidates(aut.initial_modes):
        new = aut.reset_point(jt, states, aut.initial_modes)
        for j, s in enumerate(states):
            if j != jt.agent:
                assert new[j] == s


def test_automaton_is_pure():
    sc = load_scenario(SCENARIOS / "car3_m1.json")
    a, b = build_automaton(sc), build_automaton(sc)
    assert [[s.fingerprint for s in t] for t in a.transitions] == [[s.fingerprint for s in t] for t in b.transitions]
    assert a.initial_rects == b.initial_rects and a.initial_modes == b.initial_modes


def test_point_initial_set_accepted():
    doc = json.loads((SCENARIOS / "drone2_m6.json").read_text())
    doc["agents"][0]["initial"] = [0, 0, 2, 1, 0, 0]
    sc = scenario_from_config(doc, SCENARIOS)
    assert sc.agents[0].initial.is_point()


@pytest.mark.parametrize(
    "edit,match",
    [
        (lambda d: d.pop("map"), "map"),
        (lambda d: d["agents"][0].update(type="boat"), "agent type"),
        (lambda d: d["agents"][0].update(initial=[[0], [1]]), "initial"),
        (lambda d: d["agents"][0].update(logic="../logic/none.vdl"), "not found"),
        (lambda d: d.update(asserts=[{"file": "../logic/drone_m5_asserts.vdl", "agents": ["ghost"]}]), "ghost"),
        (lambda d: d.update(map="M4"), "map"),
    ],
)
def test_config_errors(edit, match):
    doc = json.loads((SCENARIOS / "drone2_m6.json").read_text())
    edit(doc)
    with pytest.raises(ScenarioError, match=match):
        scenario_from_config(doc, SCENARIOS)


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ScenarioError, match="invalid JSON"):
        load_scenario(p)


def test_per_agent_asserts():
    aut = build_automaton(load_scenario(SCENARIOS / "drone3_m5.json"))
    labels = [sorted(a.label for a in specs) for specs in aut.asserts]
    assert labels[0] == ["altitude", "separation", "unsafe region"]
    assert all("unsafe region" not in l for l in labels[1:])


@pytest.mark.parametrize("name", sorted(p.name for p in SCENARIOS.glob("*.json")))
def test_bundled_scenarios_build(name):
    build_automaton(load_scenario(SCENARIOS / name))


def test_noise_only_enlarges_enabled_region(rng):
    clear = build_automaton(load_scenario(SCENARIOS / "car3_m1.json"))
    noisy = build_automaton(load_scenario(SCENARIOS / "car3_m1_noisy.json"))
    modes = clear.initial_modes
    pairs = list(zip(clear.candidates(modes), noisy.candidates(modes)))
    assert pairs
    for _ in range(300):
        rects = []
        for _ in range(3):
            lo = np.array([rng.uniform(0, 10), rng.uniform(-1, 1), 0, 1])
            rects.append(HyperRect.from_bounds(lo, lo + [rng.uniform(0, 2), rng.uniform(0, 0.5), 0, 0]))
        for a, b in pairs:
            if noisy.guard_verdict(b, rects, modes) is TriBool.FALSE:
                assert clear.guard_verdict(a, rects, modes) is TriBool.FALSE
