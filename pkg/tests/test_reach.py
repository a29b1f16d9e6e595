import json

import numpy as np
import pytest

from versekit.agent import ModePair, example_decomposition, flow_batch
from versekit.extract import TriBool
from versekit.geometry import HyperRect, contains
from versekit.maps import builtin_map
from versekit.reach import (
    ReachError, decomposition_post, keep_stay, post_cont, sample_points, simulate, simulate_many, verify,
)
from versekit.scenario import build_automaton, load_scenario, scenario_from_config

from conftest import SCENARIOS
from oracles import covered, sampling_failures

T, F, U = TriBool.TRUE, TriBool.FALSE, TriBool.UNKNOWN


def automaton(name, edit=None):
    doc = json.loads((SCENARIOS / name).read_text())
    if edit:
        edit(doc)
    return build_automaton(scenario_from_config(doc, SCENARIOS, name))


def points_scenario(tmp_path, assert_src, xs, rate=0.0):
    (tmp_path / "p.vdl").write_text(
        "class TacticalMode(Enum):\n    Inc = auto()\n\n"
        f"def decisionLogic(ego, others):\n    assert {assert_src}, \"sep\"\n    return ego\n"
    )
    doc = {
        "map": "free", "delta": 0.5, "dt": 0.05, "horizon_steps": 3,
        "agents": [
            {"id": f"p{i}", "type": "point1d", "logic": "p.vdl", "initial": [[x], [x]], "mode": ["Inc", "T0"],
             "params": {"rates": {"Inc": rate}}}
            for i, x in enumerate(xs)
        ],
    }
    return build_automaton(scenario_from_config(doc, tmp_path))


@pytest.mark.parametrize(
    "verdicts,stay",
    [([], True), ([F, F], True), ([U], True), ([T], False), ([T, F], False), ([T, U], True), ([T, T], True)],
)
def test_keep_stay(verdicts, stay):
    assert keep_stay(verdicts) is stay


def test_sample_points_cap():
    r = HyperRect.from_bounds([0] * 7, [7, 6, 5, 4, 3, 2, 1])
    pts = sample_points(r)
    assert len(pts) == 1 + 2 ** 5 + 2 * 7
    assert np.all(pts[: 1 + 2 ** 5, 5:] == [1.0, 0.5])
    faces = pts[1 + 2 ** 5:]
    assert np.all((faces != pts[0]).sum(axis=1) == 1)
    assert len({tuple(p) for p in faces}) == 14
    assert np.all(sample_points(HyperRect.point([1, 2])) == [1, 2])


def test_point_set_tube_is_the_trace():
    aut = automaton("car3_m1.json")
    a = aut.agents[0]
    x0 = [0.5, 0.0, 0.0, 5.0]
    tube = post_cont(a, HyperRect.point(x0), a.mode, aut.map, 1.0, 0.05, "sample-bloat")
    trace = flow_batch(a.kind, np.array([x0]), a.mode, aut.map, 1.0, 0.05, a.params)[:, 0]
    assert np.array_equal(tube.lo, trace) and np.array_equal(tube.hi, trace)


def test_translated_interval_on_straight_lane():
    aut = automaton("car3_m1.json")
    a = aut.agents[1]
    rect = HyperRect.from_bounds([0, 0, 0, 1], [0.1, 0, 0, 1])
    tube = post_cont(a, rect, ModePair("Normal", "T1"), aut.map, 1.0, 0.05, "sample-bloat")
    assert tube.end.lo[0] <= 1.0 + 1e-9 and tube.end.hi[0] >= 1.1 - 1e-9


def test_identity_and_expression_resets(tmp_path):
    (tmp_path / "r.vdl").write_text(
        "class TacticalMode(Enum):\n    Normal = auto()\n    SwitchLeft = auto()\n\n"
        "def decisionLogic(ego, others):\n"
        "    if ego.tactical_mode == TacticalMode.Normal:\n"
        "        if ego.x > 5:\n"
        "            ego.v = ego.v + 1\n"
        "            ego.theta = 0\n"
        "            ego.tactical_mode = TacticalMode.SwitchLeft\n"
        "    return ego\n"
    )
    doc = {"map": "M1", "agents": [
        {"id": "c", "type": "car", "logic": "r.vdl", "initial": [[0, 0, 0, 1], [0, 0, 0, 1]], "mode": ["Normal", "T1"]}
    ]}
    aut = build_automaton(scenario_from_config(doc, tmp_path))
    jt = aut.candidates(aut.initial_modes)[0]
    rect = HyperRect.from_bounds([4, 0, -1, 0], [7, 0.5, 1, 2])
    (out,) = aut.post_disc(jt, [rect], aut.initial_modes)
    assert out == HyperRect.from_bounds([5, 0, 0, 1], [7, 0.5, 0, 3])


def test_identity_reset_keeps_clipped_set():
    aut = automaton("toy.json")
    jt = aut.candidates(aut.initial_modes)[0]
    (out,) = aut.post_disc(jt, [HyperRect.from_bounds([0.5], [1.5])], aut.initial_modes)
    assert out == HyperRect.from_bounds([1.0], [1.5])


def test_figure8_simulation_branches():
    tree = simulate(automaton("drone2_m6.json"))
    assert len(tree.transition_branches()) == 2
    assert {b[0].split(": ")[1] for b in tree.transition_branches()} == {"Normal/T1 -> MoveUp/M10",
                                                                      "Normal/T1 -> MoveDown/M12"}


def test_single_npv_agent_is_a_chain():
    aut = automaton("drone2_m6.json", lambda d: d.update(agents=d["agents"][1:]))
    tree = simulate(aut)
    assert len(tree.nodes) == aut.scenario.horizon_steps
    assert all(len(n.children) <= 1 for n in tree.nodes)
    assert tree.transition_branches() == []


def closure_oracle(aut, states, modes, depth):
    """Transition sequences of the point semantics, by plain recursion."""
    sc = aut.scenario
    end = [
        flow_batch(a.kind, np.array([s]), m, sc.map, sc.delta, sc.dt, a.params)[-1, 0].tolist()
        for a, s, m in zip(aut.agents, states, modes)
    ]
    if depth + 1 >= sc.horizon_steps:
        return {()}
    out, enabled, n = set(), 0, 0
    for jt in aut.candidates(modes):
        n += 1
        if not aut.guard_point(jt, end, modes):
            continue
        enabled += 1
        nxt = aut.next_modes(jt, modes)
        label = f"{aut.agents[jt.agent].id}: {modes[jt.agent]} -> {nxt[jt.agent]}"
        out |= {(label,) + rest for rest in closure_oracle(aut, aut.reset_point(jt, end, modes), nxt, depth + 1)}
    if enabled == 0 or enabled > 1:
        out |= closure_oracle(aut, end, modes, depth + 1)
    return out


@pytest.mark.parametrize("name", ["car3_m1.json", "drone2_m6.json", "toy.json"])
def test_simulate_matches_closure_oracle(name):
    aut = automaton(name)
    tree = simulate(aut)
    init = [list(r.center()) for r in aut.initial_rects]
    expected = closure_oracle(aut, init, aut.initial_modes, 0)
    expected.discard(())
    assert tree.transition_branches() == sorted(expected)


def test_simulate_many_agrees_with_simulate():
    aut = automaton("drone2_m6.json")
    x0 = np.concatenate([r.center() for r in aut.initial_rects])[None]
    batch = simulate_many(aut, x0)
    tree = simulate(aut)
    assert len(batch) == len(tree.nodes)
    for b, n in zip(batch, tree.nodes):
        assert b.modes == n.modes
        assert np.allclose(b.states[:, 0], n.lo, atol=1e-12)


def test_simulate_rejects_bad_initial_state():
    with pytest.raises(ReachError):
        simulate(automaton("toy.json"), [[0.0, 1.0]])
    with pytest.raises(ReachError):
        simulate_many(automaton("toy.json"), np.zeros((3, 2)))


def test_verify_is_deterministic():
    a = verify(automaton("drone2_m6.json")).dumps()
    b = verify(automaton("drone2_m6.json")).dumps()
    assert a == b


def test_every_edge_switches_one_agent():
    tree = verify(automaton("drone2_m6.json"))
    for n in tree.nodes[1:]:
        parent = tree.nodes[n.parent]
        diff = sum(a != b for a, b in zip(parent.modes, n.modes))
        assert diff == (1 if n.transition else 0)


def test_node_limit_flags_incomplete():
    tree = verify(automaton("drone2_m6.json"), max_nodes=5)
    assert tree.incomplete and len(tree.nodes) == 5


def test_tube_monotone_in_initial_set():
    def shrink(d):
        d["agents"][0]["initial"] = [[0.3, -0.1, 0.0, 5.0], [0.6, 0.1, 0.0, 5.0]]

    small, big = verify(automaton("car3_m1.json", shrink)), verify(automaton("car3_m1.json"))
    for n in small.nodes:
        boxes = [(m.lo, m.hi) for m in big.nodes if m.depth == n.depth]
        for k in range(len(n.lo)):
            assert covered((n.lo[k], n.hi[k]), [(lo[k], hi[k]) for lo, hi in boxes])


def test_toy_tube_sound_by_sampling(rng):
    tree = verify(automaton("toy.json"))
    bad, worst = sampling_failures(tree, 50, rng)
    assert bad == 0 and worst <= 1e-6


def test_tautology_has_no_violations(tmp_path):
    tree = verify(points_scenario(tmp_path, "0 < 1", [0.0, 0.5]))
    assert tree.violations == []


def test_separation_violated_at_root(tmp_path):
    aut = points_scenario(tmp_path, "all(ego.x - o.x >= 1 or o.x - ego.x >= 1 for o in others)", [0.0, 0.5])
    tree = verify(aut)
    assert tree.violations and tree.violations[0].node == 0
    assert tree.violations[0].verdict is TriBool.FALSE


def test_unsafe_region_after_moving_down():
    tree = verify(automaton("drone3_m5.json"))
    hits = [tree.branch_key(tree.nodes[v.node]) for v in tree.violations if v.label == "unsafe region"]
    assert hits and all(any("MoveDown" in step for step in b) for b in hits)


def test_embedding_fixed_point_and_degenerate_width():
    lo, hi = decomposition_post(example_decomposition, [1, 1], [1, 1], [0, 0], [0, 0], 5.0, 0.01)
    assert np.allclose(lo, 1.0) and np.allclose(hi, 1.0)
    lo, hi = decomposition_post(example_decomposition, [0.5, 1.5], [0.5, 1.5], [0.05, 0], [0.05, 0], 2.0, 0.01)
    assert np.abs(hi - lo).max() < 1e-9


def test_mixed_monotone_engine_in_scenario():
    tree = verify(automaton("uncertain.json"))
    assert tree.engine == "mixed-monotone"
    assert np.all(tree.nodes[-1].hi >= tree.nodes[-1].lo)
    assert contains(HyperRect.from_bounds(tree.nodes[0].lo[0], tree.nodes[0].hi[0]), tree.nodes[0].init[0])


def test_tree_json_and_csv():
    tree = verify(automaton("toy.json"))
    doc = json.loads(tree.dumps())
    assert len(doc["nodes"]) == len(tree.nodes)
    assert tree.to_csv().splitlines()[0].startswith("node")
