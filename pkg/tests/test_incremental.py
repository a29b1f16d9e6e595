import json
from dataclasses import replace
from collections import defaultdict

import numpy as np
import pytest

from versekit.agent import ModePair
from versekit.geometry import HyperRect, contains
from versekit.incremental import Caches, FlowCache, GuardCache, simulate_inc, verify_inc
from versekit.reach import AgentTube, post_cont, simulate, verify
from versekit.scenario import build_automaton, scenario_from_config

from conftest import LOGIC, SCENARIOS
from oracles import mode_path, sampling_failures


def automaton(name, edit=None, base=SCENARIOS):
    doc = json.loads((SCENARIOS / name).read_text())
    if edit:
        edit(doc)
    return build_automaton(scenario_from_config(doc, base, name))


def edited_car3(tmp_path):
    """3-car M1 with the CA car reacting only within 4.5 m."""
    src = (LOGIC / "car_ca.vdl").read_text().replace("< 5 for", "< 4.5 for")
    (tmp_path / "ca45.vdl").write_text(src)

    def edit(doc):
        for a in doc["agents"]:
            a["logic"] = str(SCENARIOS / a["logic"])
        doc["agents"][0]["logic"] = str(tmp_path / "ca45.vdl")

    return automaton("car3_m1.json", edit, tmp_path)


def tube(lo, hi):
    lo, hi = np.array(lo, float), np.array(hi, float)
    return AgentTube(lo[None], hi[None], HyperRect.from_bounds(lo, hi))


def test_fresh_cache_counts_nothing():
    s = Caches().stats()
    assert (s.guard_hits, s.guard_misses, s.flow_hits, s.flow_misses) == (0, 0, 0, 0)
    assert s.guard_hit_rate == 0.0 and s.flow_hit_rate == 0.0


def test_flow_cache_exact_contained_and_mode_miss():
    c = FlowCache()
    key = ("car", "p", "Normal", "T1")
    outer = HyperRect.from_bounds([0, 0], [2, 2])
    t = tube([0, 0], [3, 3])
    c.put(key, outer, t)
    assert c.get(key, outer) is t
    assert c.get(key, HyperRect.from_bounds([0.5, 0.5], [1, 1])) is t
    assert c.get(key, HyperRect.from_bounds([0.5, 0.5], [2.5, 1])) is None
    assert c.get(("car", "p", "SwitchLeft", "M10"), outer) is None
    assert (c.hits, c.misses) == (2, 2)


def test_flow_cache_lru_bound():
    c = FlowCache(bucket_size=3)
    for i in range(5):
        c.put(("k",), HyperRect.point([float(i)]), tube([i], [i]))
    assert len(c) == 3
    assert c.get(("k",), HyperRect.point([0.0])) is None
    assert c.get(("k",), HyperRect.point([4.0])) is not None


def test_contained_hit_covers_fresh_post():
    aut = automaton("car3_m1.json")
    a, sc = aut.agents[0], aut.scenario
    caches = Caches()
    big = a.initial
    small = HyperRect.from_bounds([0.2, -0.1, 0, 5], [0.7, 0.1, 0, 5])
    caches.flow.put(("x",), big, post_cont(a, big, a.mode, sc.map, sc.delta, sc.dt, sc.engine))
    cached = caches.flow.get(("x",), small)
    fresh = post_cont(a, small, a.mode, sc.map, sc.delta, sc.dt, sc.engine)
    assert np.all(cached.lo <= fresh.lo + 1e-9) and np.all(cached.hi >= fresh.hi - 1e-9)


def test_guard_keys_round_noise_but_separate_sets():
    aut = automaton("toy.json")
    tree = verify(aut)
    jt = aut.candidates(aut.initial_modes)[0]
    node = tree.nodes[0]
    noisy = replace(node, init=(HyperRect.from_bounds([0.05 + 1e-16], [0.25]),))
    other = replace(node, init=(HyperRect.from_bounds([0.05 + 1e-6], [0.25]),))
    assert GuardCache.key(noisy, jt) == GuardCache.key(node, jt)
    assert GuardCache.key(other, jt) != GuardCache.key(node, jt)


def test_repeat_equivalence_and_full_guard_hits():
    aut = automaton("drone2_m6.json")
    cold = verify(aut)
    caches = Caches()
    first, s1 = verify_inc(aut, caches)
    assert first.dumps() == cold.dumps()
    again, s2 = verify_inc(aut, caches)
    assert again.dumps() == cold.dumps()
    assert s2.guard_misses == 0 and s2.guard_hits > 0 and s2.flow_misses == 0
    assert s1.guard_hits <= s1.guard_hits + s1.guard_misses


def test_record_mode_matches_plain_verify():
    aut = automaton("toy.json")
    caches = Caches()
    tree, stats = verify_inc(aut, caches, read=False)
    assert tree.dumps() == verify(aut).dumps()
    assert stats.guard_hits == stats.flow_hits == 0 and len(caches.guard.entries) > 0


def test_simulation_repeat_hit_rate():
    aut = automaton("car3_m1.json")
    caches = Caches()
    simulate_inc(aut, caches)
    tree, stats = simulate_inc(aut, caches)
    assert tree.dumps() == simulate(aut).dumps()
    assert stats.guard_hit_rate >= 0.75
    assert stats.guard_hits <= stats.guard_hits + stats.guard_misses


def test_header_mismatch_starts_cold():
    caches = Caches()
    verify_inc(automaton("toy.json"), caches)
    finer = automaton("toy.json", lambda d: d.update(dt=0.025))
    _, stats = verify_inc(finer, caches)
    _, cold = verify_inc(finer, Caches())
    assert (stats.guard_hits, stats.flow_hits) == (cold.guard_hits, cold.flow_hits)
    assert caches.header["dt"] == 0.025


def test_changed_logic_is_sound_and_reuses(tmp_path, rng):
    base = automaton("car3_m1.json")
    edited = edited_car3(tmp_path)
    caches = Caches()
    verify_inc(base, caches)
    inc, stats = verify_inc(edited, caches)
    fresh = verify(edited)
    assert stats.flow_hits > 0
    index = defaultdict(list)
    for n in inc.nodes:
        index[mode_path(inc, n)].append(n)
    for n in fresh.nodes:
        matches = index[mode_path(fresh, n)]
        assert any(np.all(m.lo <= n.lo + 1e-9) and np.all(m.hi >= n.hi - 1e-9) for m in matches)
    bad, _ = sampling_failures(inc, 100, rng)
    assert bad == 0


def test_changed_logic_only_misses_own_guards(tmp_path):
    base = automaton("car3_m1.json")
    edited = edited_car3(tmp_path)
    caches = Caches()
    verify_inc(base, caches)
    fps = {jt.spec.fingerprint for jt in edited.candidates(edited.initial_modes) if jt.agent == 0}
    assert fps and not any(k[3] in fps for k in caches.guard.entries)


def test_cache_purity():
    aut = automaton("drone2_m6.json")
    before = verify(aut).dumps()
    caches = Caches()
    verify_inc(aut, caches)
    verify_inc(automaton("drone2_m6.json", lambda d: d["agents"][0].update(
        initial=[[0, -0.1, 2, 1, 0, 0], [0, 0.1, 2, 1, 0, 0]])), caches)
    assert verify(aut).dumps() == before


def test_cache_file_round_trip(tmp_path):
    aut = automaton("drone2_m6.json")
    caches = Caches()
    tree, _ = verify_inc(aut, caches)
    caches.save(tmp_path / "c.json")
    loaded = Caches.load(tmp_path / "c.json")
    again, stats = verify_inc(aut, loaded)
    assert again.dumps() == tree.dumps()
    assert stats.guard_misses == 0 and stats.flow_misses == 0


def test_stats_are_per_run_deltas():
    aut = automaton("toy.json")
    caches = Caches()
    _, a = verify_inc(aut, caches)
    _, b = verify_inc(aut, caches)
    total = caches.stats()
    assert total.guard_hits == a.guard_hits + b.guard_hits
    assert total.flow_misses == a.flow_misses + b.flow_misses
