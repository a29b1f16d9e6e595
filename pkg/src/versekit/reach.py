"""Branching simulation and reachtube verification.

Both analyses grow an execution tree breadth first. A node covers one
decision period: it holds the joint set (or state) at the start of the
period, the per-step boxes over the period, and the set at its end, where
the guards of every candidate transition are checked.

Continuous post comes from one of two engines:

* sample-bloat simulates the center, corners and face centers of each agent's box, takes
  the hull of the samples at every step and widens it by ``BETA`` times the
  sample spread (half on each side);
* mixed-monotone integrates the embedding system of an agent type that
  ships a decomposition function, which bounds every disturbance.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .agent import AgentDef, FlowError, ModePair, flow_batch, steps_for
from .extract import EvalError, TriBool
from .geometry import HyperRect, TimedRect
from .maps import MapDef, MapError
from .scenario import HybridAutomaton, JointTransition

BETA = 0.2
CORNER_DIMS = 5
MAX_NODES = 100_000


class ReachError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Continuous post


@dataclass
class AgentTube:
    """Per-step boxes of one agent over one period, times relative to its start."""

    lo: np.ndarray  # (steps + 1, n)
    hi: np.ndarray
    end: HyperRect


def sample_points(rect: HyperRect, cap: int = CORNER_DIMS) -> np.ndarray:
    """Center, the corners over the ``cap`` widest nondegenerate dimensions, and the face centers.

    Face centers catch extremes that sit inside a face, such as the longest
    run along a lane, which starts at the front face with zero heading.
    """
    lo, hi = np.asarray(rect.lo), np.asarray(rect.hi)
    widths = hi - lo
    order = np.argsort(-widths, kind="stable")
    dims = [int(i) for i in order if widths[i] > 0][:cap]
    center = 0.5 * (lo + hi)
    pts = [center]
    for bits in itertools.product((0, 1), repeat=len(dims)):
        p = center.copy()
        for d, b in zip(dims, bits):
            p[d] = hi[d] if b else lo[d]
        pts.append(p)
    for d in np.flatnonzero(widths > 0):
        for v in (lo[d], hi[d]):
            p = center.copy()
            p[d] = v
            pts.append(p)
    return np.array(pts)


def sample_bloat_post(
    agent: AgentDef, rect: HyperRect, mode: ModePair, map_: MapDef, delta: float, dt: float,
    beta: float = BETA, cap: int = CORNER_DIMS,
) -> AgentTube:
    traj = flow_batch(agent.kind, sample_points(rect, cap), mode, map_, delta, dt, agent.params)
    lo, hi = traj.min(axis=1), traj.max(axis=1)
    pad = 0.5 * beta * (hi - lo)
    # the end set is the plain sample hull so bloat does not compound across periods
    end = HyperRect.from_bounds(lo[-1], hi[-1])
    return AgentTube(lo - pad, hi + pad, end)


def embedding_post(agent: AgentDef, rect: HyperRect, mode: ModePair, delta: float, dt: float) -> AgentTube:
    """Integrate the embedding system ``xl' = d(xl, xu, wl, wu)``, ``xu' = d(xu, xl, wu, wl)`` with RK4."""
    kind = agent.kind
    if kind.decomposition is None:
        raise ReachError(f"agent type {kind.name} has no decomposition function")
    w_lo, w_hi = kind.disturbance(agent.params)
    d = kind.decomposition
    n = steps_for(delta, dt)

    def f(xl, xu):
        return (
            d(xl, xu, w_lo, w_hi, mode.tactical, agent.params),
            d(xu, xl, w_hi, w_lo, mode.tactical, agent.params),
        )

    lo = np.empty((n + 1, rect.ndim))
    hi = np.empty_like(lo)
    xl, xu = np.asarray(rect.lo, float), np.asarray(rect.hi, float)
    lo[0], hi[0] = xl, xu
    for k in range(1, n + 1):
        a = f(xl, xu)
        b = f(xl + 0.5 * dt * a[0], xu + 0.5 * dt * a[1])
        c = f(xl + 0.5 * dt * b[0], xu + 0.5 * dt * b[1])
        e = f(xl + dt * c[0], xu + dt * c[1])
        xl = xl + dt / 6.0 * (a[0] + 2 * b[0] + 2 * c[0] + e[0])
        xu = xu + dt / 6.0 * (a[1] + 2 * b[1] + 2 * c[1] + e[1])
        if not (np.all(np.isfinite(xl)) and np.all(np.isfinite(xu))):
            raise FlowError(f"embedding diverged at step {k}")
        lo[k], hi[k] = xl, xu
    return AgentTube(lo, hi, HyperRect.from_bounds(xl, np.maximum(xu, xl)))


def decomposition_post(
    decomposition: Callable, x_lo, x_hi, w_lo, w_hi, duration: float, dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds of ``x' = f(x, w)`` from a decomposition ``d(x, x_hat, w, w_hat)``.

    Returns per-step lower and upper bounds, each of shape (steps + 1, n).
    """
    from .agent import AgentType

    kind = AgentType(
        "decomposed", tuple(f"x{i}" for i in range(len(x_lo))), (), lambda raw: None, None,
        uses_map=False, decomposition=lambda x, xh, w, wh, p, q: decomposition(x, xh, w, wh),
        disturbance=lambda params: (np.asarray(w_lo, float), np.asarray(w_hi, float)),
    )
    agent = AgentDef("decomposed", kind, None, HyperRect.from_bounds(x_lo, x_hi), ModePair("Default", "free"), 0)
    tube = embedding_post(agent, agent.initial, agent.mode, duration, dt)
    return tube.lo, tube.hi


def post_cont(
    agent: AgentDef, rect: HyperRect, mode: ModePair, map_: MapDef, delta: float, dt: float, engine: str,
) -> AgentTube:
    if engine == "mixed-monotone" and agent.kind.decomposition is not None:
        return embedding_post(agent, rect, mode, delta, dt)
    return sample_bloat_post(agent, rect, mode, map_, delta, dt)


# ---------------------------------------------------------------------------
# Trees


@dataclass
class Transition:
    agent: int
    src: ModePair
    dst: ModePair

    def label(self, agents: Sequence[AgentDef]) -> str:
        return f"{agents[self.agent].id}: {self.src} -> {self.dst}"


@dataclass
class TreeNode:
    id: int
    parent: int | None
    depth: int
    modes: tuple[ModePair, ...]
    init: tuple[HyperRect, ...]
    transition: Transition | None = None
    lo: np.ndarray | None = None  # (steps + 1, joint dim), absolute bounds at step times
    hi: np.ndarray | None = None
    end: tuple[HyperRect, ...] | None = None
    children: list[int] = field(default_factory=list)
    error: str | None = None

    def segments(self, t0: float, dt: float) -> list[TimedRect]:
        """Boxes covering each integration step, as hulls of consecutive step boxes."""
        if self.lo is None:
            return []
        lo = np.minimum(self.lo[:-1], self.lo[1:])
        hi = np.maximum(self.hi[:-1], self.hi[1:])
        return [
            TimedRect(t0 + k * dt, t0 + (k + 1) * dt, HyperRect.from_bounds(lo[k], hi[k]))
            for k in range(len(lo))
        ]


@dataclass
class Violation:
    label: str
    agent: int
    node: int
    verdict: TriBool
    t_lo: float
    t_hi: float
    witness: HyperRect


@dataclass
class ExecutionTree:
    kind: str  # "simulate" or "verify"
    automaton: HybridAutomaton
    delta: float
    dt: float
    horizon_steps: int
    engine: str
    nodes: list[TreeNode] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)
    incomplete: bool = False

    @property
    def agents(self) -> list[AgentDef]:
        return self.automaton.agents

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for a in self.agents:
            out.append(acc)
            acc += a.kind.ndim
        return out + [acc]

    def agent_bounds(self, node: TreeNode, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.offsets[i], self.offsets[i + 1]
        return node.lo[:, a:b], node.hi[:, a:b]

    def t0(self, node: TreeNode) -> float:
        return node.depth * self.delta

    def path(self, node: TreeNode) -> list[TreeNode]:
        out = []
        cur: TreeNode | None = node
        while cur is not None:
            out.append(cur)
            cur = self.nodes[cur.parent] if cur.parent is not None else None
        return out[::-1]

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes if not n.children]

    def transition_count(self) -> int:
        return sum(1 for n in self.nodes if n.transition is not None)

    def branch_key(self, node: TreeNode) -> tuple[str, ...]:
        """The sequence of transitions taken from the root down to ``node``."""
        return tuple(n.transition.label(self.agents) for n in self.path(node) if n.transition is not None)

    def transition_branches(self) -> list[tuple[str, ...]]:
        """Distinct nonempty transition sequences over root-to-leaf paths.

        A path that waits a few periods before switching gives the same
        sequence as one that switches at once, so both count as one branch.
        """
        seen = {self.branch_key(leaf) for leaf in self.leaves()}
        seen.discard(())
        return sorted(seen)

    def violating_branches(self) -> list[tuple[str, ...]]:
        bad = {v.node for v in self.violations}
        out = set()
        for leaf in self.leaves():
            if any(n.id in bad for n in self.path(leaf)):
                out.add(self.branch_key(leaf))
        return sorted(out)

    def depth_bounds(self, t_index: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Boxes of every node covering global step ``t_index``."""
        steps = steps_for(self.delta, self.dt)
        out = []
        for n in self.nodes:
            if n.lo is None:
                continue
            k = t_index - n.depth * steps
            if 0 <= k <= steps:
                out.append((n.lo[k], n.hi[k]))
        return out

    # -- serialization --------------------------------------------------

    def to_json(self) -> dict:
        agents = self.agents

        def rects(rs):
            return None if rs is None else [[list(r.lo), list(r.hi)] for r in rs]

        nodes = []
        for n in self.nodes:
            t0 = self.t0(n)
            nodes.append({
                "id": n.id,
                "parent": n.parent,
                "depth": n.depth,
                "t": [t0, t0 + self.delta],
                "modes": [[m.tactical, m.track] for m in n.modes],
                "transition": None if n.transition is None else {
                    "agent": agents[n.transition.agent].id,
                    "src": list(n.transition.src),
                    "dst": list(n.transition.dst),
                },
                "init": rects(n.init),
                "end": rects(n.end),
                "tube": [[s.t_lo, s.t_hi, list(s.rect.lo), list(s.rect.hi)] for s in n.segments(t0, self.dt)],
                "children": list(n.children),
                "error": n.error,
            })
        return {
            "kind": self.kind,
            "scenario": self.automaton.scenario.name,
            "engine": self.engine,
            "delta": self.delta,
            "dt": self.dt,
            "horizon_steps": self.horizon_steps,
            "incomplete": self.incomplete,
            "agents": [{"id": a.id, "type": a.kind.name, "fields": list(a.kind.fields)} for a in agents],
            "nodes": nodes,
            "violations": [self.violation_json(v) for v in self.violations],
        }

    def violation_json(self, v: Violation) -> dict:
        return {
            "assert": v.label,
            "agent": self.agents[v.agent].id,
            "node": v.node,
            "verdict": v.verdict.value,
            "t": [v.t_lo, v.t_hi],
            "witness": [list(v.witness.lo), list(v.witness.hi)],
            "path": list(self.branch_key(self.nodes[v.node])),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        width = max(a.kind.ndim for a in self.agents)
        w.writerow(["node", "depth", "agent", "t_lo", "t_hi"]
                   + [f"lo{i}" for i in range(width)] + [f"hi{i}" for i in range(width)])
        off = self.offsets
        for n in self.nodes:
            t0 = self.t0(n)
            for s in n.segments(t0, self.dt):
                for i, a in enumerate(self.agents):
                    lo = list(s.rect.lo[off[i]:off[i + 1]])
                    hi = list(s.rect.hi[off[i]:off[i + 1]])
                    pad = [""] * (width - len(lo))
                    w.writerow([n.id, n.depth, a.id, repr(s.t_lo), repr(s.t_hi)]
                               + [repr(x) for x in lo] + pad + [repr(x) for x in hi] + pad)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Exploration


def keep_stay(verdicts: Sequence[TriBool]) -> bool:
    """Whether the no-transition child is explored next to the enabled transitions.

    Staying is ruled out only when some guard definitely holds and every
    other candidate guard is definitely false.
    """
    if TriBool.TRUE not in verdicts:
        return True
    return sum(v is not TriBool.FALSE for v in verdicts) > 1


FlowFn = Callable[[int, HyperRect, ModePair], AgentTube]
DiscFn = Callable[[TreeNode, tuple[HyperRect, ...], JointTransition], tuple[TriBool, tuple[HyperRect, ...] | None]]


class Explorer:
    """Breadth-first tree growth shared by simulate, verify and verifyInc."""

    def __init__(self, automaton: HybridAutomaton, kind: str, engine: str | None = None,
                 max_nodes: int = MAX_NODES):
        sc = automaton.scenario
        self.automaton = automaton
        self.steps = steps_for(sc.delta, sc.dt)
        self.tree = ExecutionTree(kind, automaton, sc.delta, sc.dt, sc.horizon_steps, engine or sc.engine)
        self.max_nodes = max_nodes

    def flow(self, i: int, rect: HyperRect, mode: ModePair) -> AgentTube:
        sc = self.automaton.scenario
        return post_cont(sc.agents[i], rect, mode, sc.map, sc.delta, sc.dt, self.tree.engine)

    def disc(self, node: TreeNode, end: tuple[HyperRect, ...], jt: JointTransition):
        aut = self.automaton
        verdict = aut.guard_verdict(jt, end, node.modes)
        if verdict is TriBool.FALSE:
            return verdict, None
        return verdict, aut.post_disc(jt, end, node.modes)

    def run(self, flow_fn: FlowFn | None = None, disc_fn: DiscFn | None = None,
            init: tuple[HyperRect, ...] | None = None) -> ExecutionTree:
        flow_fn = flow_fn or self.flow
        disc_fn = disc_fn or self.disc
        aut, tree = self.automaton, self.tree
        root = TreeNode(0, None, 0, aut.initial_modes, init or aut.initial_rects)
        tree.nodes.append(root)
        queue = deque([root])
        while queue:
            node = queue.popleft()
            try:
                self._expand(node, flow_fn)
            except (FlowError, MapError, EvalError) as exc:
                node.error = f"{type(exc).__name__}: {exc}"
                continue
            self._check_asserts(node)
            if node.depth + 1 >= tree.horizon_steps:
                continue
            try:
                children = self._successors(node, disc_fn)
            except (MapError, EvalError) as exc:
                node.error = f"{type(exc).__name__}: {exc}"
                continue
            for modes, rects, tr in children:
                if len(tree.nodes) >= self.max_nodes:
                    tree.incomplete = True
                    queue.clear()
                    break
                child = TreeNode(len(tree.nodes), node.id, node.depth + 1, modes, rects, tr)
                tree.nodes.append(child)
                node.children.append(child.id)
                queue.append(child)
        return tree

    def _expand(self, node: TreeNode, flow_fn: FlowFn) -> None:
        parts = [flow_fn(i, r, m) for i, (r, m) in enumerate(zip(node.init, node.modes))]
        node.lo = np.concatenate([p.lo for p in parts], axis=1)
        node.hi = np.concatenate([p.hi for p in parts], axis=1)
        node.end = tuple(p.end for p in parts)

    def _successors(self, node: TreeNode, disc_fn: DiscFn):
        aut = self.automaton
        verdicts, out = [], []
        for jt in aut.candidates(node.modes):
            verdict, rects = disc_fn(node, node.end, jt)
            verdicts.append(verdict)
            if verdict is TriBool.FALSE or rects is None:
                continue
            modes = aut.next_modes(jt, node.modes)
            out.append((modes, rects, Transition(jt.agent, node.modes[jt.agent], modes[jt.agent])))
        if keep_stay(verdicts):
            out.append((node.modes, node.end, None))
        return out

    def _check_asserts(self, node: TreeNode) -> None:
        aut, tree = self.automaton, self.tree
        checks = aut.all_asserts()
        if not checks:
            return
        off = tree.offsets
        segments = node.segments(tree.t0(node), tree.dt)
        for i, spec in checks:
            for s in segments:
                rects = [s.rect.slice(off[j], off[j + 1]) for j in range(len(aut.agents))]
                verdict = aut.assert_verdict(i, spec, rects, node.modes)
                if verdict is not TriBool.TRUE:
                    tree.violations.append(Violation(spec.label, i, node.id, verdict, s.t_lo, s.t_hi, s.rect))
                    break


def verify(automaton: HybridAutomaton, engine: str | None = None, max_nodes: int = MAX_NODES) -> ExecutionTree:
    """Reachtube tree over the scenario horizon from the initial sets."""
    return Explorer(automaton, "verify", engine, max_nodes).run()


# ---------------------------------------------------------------------------
# Simulation


class PointExplorer(Explorer):
    def flow(self, i: int, rect: HyperRect, mode: ModePair) -> AgentTube:
        sc = self.automaton.scenario
        agent = sc.agents[i]
        traj = flow_batch(agent.kind, np.asarray(rect.lo)[None, :], mode, sc.map, sc.delta, sc.dt, agent.params)
        states = traj[:, 0, :]
        return AgentTube(states, states.copy(), HyperRect.point(states[-1]))

    def disc(self, node: TreeNode, end: tuple[HyperRect, ...], jt: JointTransition):
        aut = self.automaton
        states = [list(r.lo) for r in end]
        if not aut.guard_point(jt, states, node.modes):
            return TriBool.FALSE, None
        new = aut.reset_point(jt, states, node.modes)
        return TriBool.TRUE, tuple(HyperRect.point(s) for s in new)


def simulate(automaton: HybridAutomaton, initial: Sequence[Sequence[float]] | None = None,
             max_nodes: int = MAX_NODES) -> ExecutionTree:
    """Branching simulation from one joint state (the centers of the initial sets by default)."""
    init = initial_points(automaton, initial)
    return PointExplorer(automaton, "simulate", "simulation", max_nodes).run(init=init)


def initial_points(automaton: HybridAutomaton, initial=None) -> tuple[HyperRect, ...]:
    if initial is None:
        initial = [r.center() for r in automaton.initial_rects]
    if len(initial) != len(automaton.agents):
        raise ReachError(f"need one initial state per agent, got {len(initial)}")
    for a, x in zip(automaton.agents, initial):
        if len(x) != a.kind.ndim:
            raise ReachError(f"agent {a.id}: initial state needs {a.kind.ndim} values")
    return tuple(HyperRect.point(x) for x in initial)


@dataclass
class BatchNode:
    """A group of simulations sharing one mode path, stepped together."""

    id: int
    parent: int | None
    depth: int
    modes: tuple[ModePair, ...]
    members: np.ndarray  # indices into the batch of initial states
    states: np.ndarray | None = None  # (steps + 1, len(members), joint dim)
    transition: Transition | None = None
    error: str | None = None


def simulate_many(automaton: HybridAutomaton, initial: np.ndarray, max_nodes: int = MAX_NODES) -> list[BatchNode]:
    """Branching simulations from many joint states at once.

    ``initial`` is (M, joint dim). The result is the union of what
    :func:`simulate` gives for each row; rows that take the same transitions
    share nodes, and a row appears in every child it may branch into.
    """
    sc = automaton.scenario
    initial = np.asarray(initial, dtype=float)
    off = [0]
    for a in automaton.agents:
        off.append(off[-1] + a.kind.ndim)
    if initial.ndim != 2 or initial.shape[1] != off[-1]:
        raise ReachError(f"initial states must have shape (M, {off[-1]})")
    nodes = [BatchNode(0, None, 0, automaton.initial_modes, np.arange(len(initial)))]
    starts = {0: initial}
    queue = deque([0])
    while queue:
        node = nodes[queue.popleft()]
        x0 = starts.pop(node.id)
        try:
            parts = [
                flow_batch(a.kind, x0[:, off[i]:off[i + 1]], node.modes[i], sc.map, sc.delta, sc.dt, a.params)
                for i, a in enumerate(automaton.agents)
            ]
        except (FlowError, MapError) as exc:
            node.error = f"{type(exc).__name__}: {exc}"
            continue
        node.states = np.concatenate(parts, axis=2)
        if node.depth + 1 >= sc.horizon_steps:
            continue
        end = node.states[-1]
        cands = automaton.candidates(node.modes)
        groups: dict[int, tuple[list[int], list[np.ndarray]]] = {}
        for j, x in enumerate(end):
            states = [list(x[off[i]:off[i + 1]]) for i in range(len(automaton.agents))]
            verdicts = []
            for c, jt in enumerate(cands):
                ok = automaton.guard_point(jt, states, node.modes)
                verdicts.append(TriBool.of(ok))
                if ok:
                    new = automaton.reset_point(jt, states, node.modes)
                    g = groups.setdefault(c, ([], []))
                    g[0].append(j)
                    g[1].append(np.concatenate([np.asarray(s, float) for s in new]))
            if keep_stay(verdicts):
                g = groups.setdefault(len(cands), ([], []))
                g[0].append(j)
                g[1].append(x)
        for c in sorted(groups):
            if len(nodes) >= max_nodes:
                queue.clear()
                break
            rows, xs = groups[c]
            if c < len(cands):
                modes = automaton.next_modes(cands[c], node.modes)
                tr = Transition(cands[c].agent, node.modes[cands[c].agent], modes[cands[c].agent])
            else:
                modes, tr = node.modes, None
            child = BatchNode(len(nodes), node.id, node.depth + 1, modes, node.members[rows], transition=tr)
            nodes.append(child)
            starts[child.id] = np.array(xs)
            queue.append(child.id)
    return nodes
