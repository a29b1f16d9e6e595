"""Scenarios and the hybrid automaton they define.

A joint transition switches exactly one agent. Its guard is that agent's
extracted guard evaluated on what the sensor shows it, and its reset
touches only that agent's state and track mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import dsl
from .agent import AGENT_TYPES, DEFAULT_DT, AgentDef, ModePair
from .extract import (
    AssertSpec, EvalError, GuardEnv, IntervalEvaluator, ModeLit, PointEvaluator, TransitionSpec, TriBool,
    _conjuncts, clip_guard, eval_interval, eval_point, extract_transitions,
)
from .geometry import HyperRect
from .maps import MapDef, MapError, resolve_map
from .sensor import SensorDef


class ScenarioError(ValueError):
    pass


ENGINES = ("sample-bloat", "mixed-monotone")


@dataclass
class Scenario:
    map: MapDef
    agents: list[AgentDef] = field(default_factory=list)
    sensor: SensorDef = field(default_factory=SensorDef)
    delta: float = 1.0
    horizon_steps: int = 10
    engine: str = "sample-bloat"
    dt: float = DEFAULT_DT
    # assert-only programs, each with the ids of the agents it applies to (None: all)
    extra_asserts: list[tuple[dsl.CheckedProgram, frozenset[str] | None]] = field(default_factory=list)
    name: str = "scenario"

    def add_agent(self, agent: AgentDef) -> None:
        if any(a.id == agent.id for a in self.agents):
            raise ScenarioError(f"duplicate agent id '{agent.id}'")
        self.agents.append(agent)

    def set_initial(self, agent_id: str, rect: HyperRect, mode: ModePair) -> None:
        agent = self.agent(agent_id)
        if rect.ndim != agent.kind.ndim:
            raise ScenarioError(f"agent {agent_id}: initial set needs {agent.kind.ndim} dims, got {rect.ndim}")
        agent.initial = rect
        agent.mode = mode

    def agent(self, agent_id: str) -> AgentDef:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise ScenarioError(f"no agent '{agent_id}'")

    @property
    def k(self) -> int:
        return len(self.agents)

    def validate(self) -> list[str]:
        """All compatibility violations; an empty list means the scenario is usable."""
        problems: list[str] = []
        if not self.agents:
            problems.append("scenario has no agents")
            return problems
        schemas = {a.kind.fields for a in self.agents}
        if len(schemas) > 1:
            problems.append(
                "agents must share one state space: " + ", ".join(f"{a.id}={a.kind.name}" for a in self.agents)
            )
        for a in self.agents:
            if self.sensor.kind == "noisy" and len(self.sensor.position_noise) != len(a.kind.positions):
                problems.append(
                    f"sensor noise has {len(self.sensor.position_noise)} dims, agent {a.id} has "
                    f"{len(a.kind.positions)} position dims"
                )
            if a.mode.track not in self.map.modes:
                problems.append(f"agent {a.id}: initial track mode {a.mode.track} not in map {self.map.name}")
                continue
            problems.extend(_closure_problems(a, self.map, self.k))
        if self.engine not in ENGINES:
            problems.append(f"unknown engine '{self.engine}'")
        if self.delta <= 0 or abs(round(self.delta / self.dt) * self.dt - self.delta) > 1e-9:
            problems.append(f"delta {self.delta} must be a positive multiple of dt {self.dt}")
        return problems


def _mode_feasible(guard, tactical: str, track: str) -> bool:
    """False if some conjunct mentioning only ego's modes is definitely false."""
    env = GuardEnv((), (), [None], [(tactical, track)], 0, None)
    for c in _conjuncts(guard):
        try:
            v = IntervalEvaluator(env).eval(c)
        except (EvalError, IndexError, KeyError, TypeError, AttributeError):
            continue
        if v is TriBool.FALSE:
            return False
    return True


def _closure_problems(agent: AgentDef, map_: MapDef, k: int) -> list[str]:
    if agent.logic is None:
        return []
    transitions, _ = extract_transitions(agent.logic, k)
    seen = {tuple(agent.mode)}
    todo = [tuple(agent.mode)]
    problems = []
    while todo:
        p, track = todo.pop()
        for spec in transitions:
            if spec.src_tactical != p or (spec.src_track is not None and spec.src_track != track):
                continue
            if not _mode_feasible(spec.guard, p, track):
                continue
            try:
                nxt = (spec.dst_tactical, map_.next_track_mode(track, p, spec.dst_tactical))
            except MapError:
                problems.append(
                    f"agent {agent.id}: map {map_.name} has no track mode for ({track}, {p}, {spec.dst_tactical})"
                )
                continue
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return problems


# ---------------------------------------------------------------------------
# Hybrid automaton


@dataclass(frozen=True)
class JointTransition:
    agent: int
    spec: TransitionSpec
    order: int  # declaration order within the agent's logic


@dataclass
class HybridAutomaton:
    scenario: Scenario
    transitions: list[list[TransitionSpec]]
    asserts: list[list[AssertSpec]]

    @property
    def agents(self) -> list[AgentDef]:
        return self.scenario.agents

    @property
    def map(self) -> MapDef:
        return self.scenario.map

    @property
    def initial_rects(self) -> tuple[HyperRect, ...]:
        return tuple(a.initial for a in self.agents)

    @property
    def initial_modes(self) -> tuple[ModePair, ...]:
        return tuple(a.mode for a in self.agents)

    def candidates(self, modes: Sequence[ModePair]) -> list[JointTransition]:
        """Transitions whose source mode matches, ordered by agent then declaration."""
        out = []
        for i, specs in enumerate(self.transitions):
            p, track = modes[i]
            for j, spec in enumerate(specs):
                if spec.src_tactical == p and (spec.src_track is None or spec.src_track == track):
                    out.append(JointTransition(i, spec, j))
        return out

    def _env(self, i: int, states, modes: Sequence[ModePair]) -> GuardEnv:
        a = self.agents[i]
        return GuardEnv(a.kind.fields, a.kind.positions, states, [tuple(m) for m in modes], i, self.map.height)

    def guard_verdict(self, jt: JointTransition, rects: Sequence[HyperRect], modes) -> TriBool:
        seen = self.scenario.sensor.observe_sets(jt.agent, rects, self.agents[jt.agent].kind.positions)
        return eval_interval(jt.spec.guard, self._env(jt.agent, seen, modes))

    def guard_point(self, jt: JointTransition, states, modes) -> bool:
        seen = self.scenario.sensor.observe(jt.agent, states)
        return eval_point(jt.spec.guard, self._env(jt.agent, seen, modes)) is TriBool.TRUE

    def next_modes(self, jt: JointTransition, modes: Sequence[ModePair]) -> tuple[ModePair, ...]:
        p, track = modes[jt.agent]
        new = ModePair(jt.spec.dst_tactical, self.map.next_track_mode(track, p, jt.spec.dst_tactical))
        return tuple(new if i == jt.agent else m for i, m in enumerate(modes))

    def post_disc(self, jt: JointTransition, rects: Sequence[HyperRect], modes) -> tuple[HyperRect, ...] | None:
        """Clip the switching agent to its guard, then apply its reset over intervals.

        Returns ``None`` when clipping proves the guard unsatisfiable on the box.
        """
        i = jt.agent
        seen = self.scenario.sensor.observe_sets(i, rects, self.agents[i].kind.positions)
        env = self._env(i, seen, modes)
        clipped = clip_guard(rects[i], jt.spec.guard, env)
        if clipped is None:
            return None
        if jt.spec.resets:
            env.rects = list(seen)
            env.rects[i] = clipped
            ev = IntervalEvaluator(env)
            fields = self.agents[i].kind.fields
            for name, expr in jt.spec.resets:
                clipped = clipped.replace(fields.index(name), ev.eval(expr))
        return tuple(clipped if j == i else r for j, r in enumerate(rects))

    def reset_point(self, jt: JointTransition, states, modes) -> list:
        i = jt.agent
        if not jt.spec.resets:
            return [list(s) for s in states]
        env = self._env(i, self.scenario.sensor.observe(i, states), modes)
        ev = PointEvaluator(env)
        new = list(states[i])
        fields = self.agents[i].kind.fields
        for name, expr in jt.spec.resets:
            new[fields.index(name)] = ev.eval(expr)
        return [new if j == i else list(s) for j, s in enumerate(states)]

    def all_asserts(self) -> list[tuple[int, AssertSpec]]:
        return [(i, a) for i, specs in enumerate(self.asserts) for a in specs]

    def assert_verdict(self, i: int, spec: AssertSpec, rects, modes) -> TriBool:
        return eval_interval(spec.predicate, self._env(i, rects, modes))


def build_automaton(sc: Scenario) -> HybridAutomaton:
    problems = sc.validate()
    if problems:
        raise ScenarioError("; ".join(problems))
    transitions, asserts = [], []
    for a in sc.agents:
        specs, checks = extract_transitions(a.logic, sc.k) if a.logic is not None else ([], [])
        for extra, only in sc.extra_asserts:
            if only is None or a.id in only:
                checks = checks + extract_transitions(extra, sc.k)[1]
        transitions.append(specs)
        asserts.append(checks)
    return HybridAutomaton(sc, transitions, asserts)


# ---------------------------------------------------------------------------
# Config files


def _load_logic(path: Path, map_: MapDef, fields: Sequence[str]) -> dsl.CheckedProgram:
    if not path.exists():
        raise ScenarioError(f"logic file not found: {path}")
    return dsl.load_program(path, map_.modes, fields)


def _rect(raw, n: int, where: str) -> HyperRect:
    if raw and not isinstance(raw[0], list):
        raw = [raw, raw]
    if not isinstance(raw, list) or len(raw) != 2 or len(raw[0]) != n or len(raw[1]) != n:
        raise ScenarioError(f"{where}: expected [[lo x{n}], [hi x{n}]]")
    try:
        return HyperRect.from_bounds(raw[0], raw[1])
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def scenario_from_config(doc: dict, base: Path | None = None, name: str = "scenario") -> Scenario:
    base = base or Path(".")
    for key in ("map", "agents"):
        if key not in doc:
            raise ScenarioError(f"config is missing '{key}'")
    try:
        map_ = resolve_map(doc["map"], base)
    except (MapError, OSError) as exc:
        raise ScenarioError(f"map: {exc}") from None
    sc = Scenario(
        map=map_,
        sensor=SensorDef.from_config(doc.get("sensor"), map_.dim),
        delta=float(doc.get("delta", 1.0)),
        horizon_steps=int(doc.get("horizon_steps", 10)),
        engine=doc.get("engine", "sample-bloat"),
        dt=float(doc.get("dt", DEFAULT_DT)),
        name=name,
    )
    for n, raw in enumerate(doc["agents"]):
        where = f"agents[{n}]"
        kind_name = raw.get("type")
        if kind_name not in AGENT_TYPES:
            raise ScenarioError(f"{where}: unknown agent type {kind_name!r}")
        kind = AGENT_TYPES[kind_name]
        logic_path = raw.get("logic")
        logic = _load_logic(base / logic_path, map_, kind.fields) if logic_path else None
        mode = raw.get("mode", ["Normal", map_.lane_ids[0]])
        try:
            agent = AgentDef(
                id=str(raw.get("id", f"agent{n}")),
                kind=kind,
                logic=logic,
                initial=_rect(raw.get("initial"), kind.ndim, where + ".initial"),
                mode=ModePair(mode[0], mode[1]),
                logic_path=logic_path,
                raw_params=dict(raw.get("params", {})),
            )
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"{where}: {exc}") from None
        sc.add_agent(agent)
    ids = {a.id for a in sc.agents}
    for n, entry in enumerate(doc.get("asserts", []) or []):
        path, only = (entry, None) if isinstance(entry, str) else (entry.get("file"), entry.get("agents"))
        if not isinstance(path, str):
            raise ScenarioError(f"asserts[{n}]: expected a path or {{'file': ..., 'agents': [...]}}")
        if only is not None:
            unknown = sorted(set(only) - ids)
            if unknown:
                raise ScenarioError(f"asserts[{n}]: unknown agents {', '.join(unknown)}")
            only = frozenset(only)
        fields = sc.agents[0].kind.fields if sc.agents else ()
        sc.extra_asserts.append((_load_logic(base / path, map_, fields), only))
    return sc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_config(doc, path.parent, path.stem)
