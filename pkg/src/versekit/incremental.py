"""Incremental verification with a guard cache and a flow cache.

The guard cache maps a node (its joint start set and joint modes) together
with the fingerprints of one transition's guard and reset to the outcome of
that transition: the three-valued verdict and the child set. Keys round
every bound to ``KEY_DIGITS`` significant digits and must match exactly.

The flow cache stores one agent's tube per (agent type, parameters, mode)
bucket. A lookup hits when a cached start box contains the queried one; the
cached, possibly larger, tube is then reused. Buckets are LRU lists of at
most ``FLOW_BUCKET`` entries, scanned most recent first.

Changing one agent's logic changes its fingerprints, so only its own guard
entries stop hitting. Flows do not depend on logic at all.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import ModePair
from .extract import TriBool
from .geometry import HyperRect, contains
from .reach import AgentTube, ExecutionTree, Explorer, TreeNode, MAX_NODES, PointExplorer, initial_points
from .scenario import HybridAutomaton, JointTransition

log = logging.getLogger(__name__)

SCHEMA = 1
KEY_DIGITS = 12
FLOW_BUCKET = 256


def _r(x: float) -> float:
    return float(f"{x:.{KEY_DIGITS}g}")


def rect_key(r: HyperRect) -> tuple:
    return tuple(_r(v) for v in r.lo) + tuple(_r(v) for v in r.hi)


def _rect_json(r: HyperRect) -> list:
    return [list(r.lo), list(r.hi)]


def _rect_from(raw) -> HyperRect:
    return HyperRect.from_bounds(raw[0], raw[1])


@dataclass
class GuardEntry:
    verdict: TriBool
    child: tuple[HyperRect, ...] | None

    @property
    def status(self) -> str:
        return "unsat" if self.child is None else "sat"


class GuardCache:
    def __init__(self):
        self.entries: dict[tuple, GuardEntry] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(node: TreeNode, jt: JointTransition) -> tuple:
        return (
            tuple(rect_key(r) for r in node.init),
            tuple(tuple(m) for m in node.modes),
            jt.agent,
            jt.spec.fingerprint,
            jt.spec.reset_fingerprint,
        )

    def get(self, key: tuple) -> GuardEntry | None:
        entry = self.entries.get(key)
        if entry is None:
            self.misses += 1
        else:
            self.hits += 1
        return entry

    def put(self, key: tuple, entry: GuardEntry) -> None:
        self.entries[key] = entry

    def to_json(self) -> list:
        out = []
        for (rects, modes, agent, gfp, rfp), e in self.entries.items():
            out.append({
                "node": [list(k) for k in rects],
                "modes": [list(m) for m in modes],
                "agent": agent,
                "guard": gfp,
                "reset": rfp,
                "verdict": e.verdict.value,
                "child": None if e.child is None else [_rect_json(r) for r in e.child],
            })
        return out

    def load_json(self, items: list) -> None:
        for it in items:
            key = (
                tuple(tuple(k) for k in it["node"]),
                tuple(tuple(m) for m in it["modes"]),
                it["agent"], it["guard"], it["reset"],
            )
            child = None if it["child"] is None else tuple(_rect_from(r) for r in it["child"])
            self.entries[key] = GuardEntry(TriBool(it["verdict"]), child)


class FlowCache:
    def __init__(self, bucket_size: int = FLOW_BUCKET):
        self.bucket_size = bucket_size
        self.buckets: dict[tuple, OrderedDict[tuple, tuple[HyperRect, AgentTube]]] = {}
        self.hits = 0
        self.misses = 0

    def get(self, mode_key: tuple, rect: HyperRect) -> AgentTube | None:
        bucket = self.buckets.get(mode_key)
        if bucket:
            k = rect_key(rect)
            if k in bucket:
                bucket.move_to_end(k)
                self.hits += 1
                return bucket[k][1]
            for k2 in reversed(bucket):
                cached, tube = bucket[k2]
                if contains(cached, rect):
                    bucket.move_to_end(k2)
                    self.hits += 1
                    return tube
        self.misses += 1
        return None

    def put(self, mode_key: tuple, rect: HyperRect, tube: AgentTube) -> None:
        bucket = self.buckets.setdefault(mode_key, OrderedDict())
        bucket[rect_key(rect)] = (rect, tube)
        bucket.move_to_end(rect_key(rect))
        while len(bucket) > self.bucket_size:
            bucket.popitem(last=False)

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets.values())

    def to_json(self) -> list:
        out = []
        for mode_key, bucket in self.buckets.items():
            for rect, tube in bucket.values():
                out.append({
                    "mode": list(mode_key),
                    "start": _rect_json(rect),
                    "lo": tube.lo.tolist(),
                    "hi": tube.hi.tolist(),
                    "end": _rect_json(tube.end),
                })
        return out

    def load_json(self, items: list) -> None:
        for it in items:
            tube = AgentTube(np.array(it["lo"], float), np.array(it["hi"], float), _rect_from(it["end"]))
            self.put(tuple(it["mode"]), _rect_from(it["start"]), tube)


@dataclass
class CacheStats:
    guard_hits: int
    guard_misses: int
    flow_hits: int
    flow_misses: int
    guard_entries: int
    flow_entries: int
    size_bytes: int

    @property
    def guard_hit_rate(self) -> float:
        n = self.guard_hits + self.guard_misses
        return self.guard_hits / n if n else 0.0

    @property
    def flow_hit_rate(self) -> float:
        n = self.flow_hits + self.flow_misses
        return self.flow_hits / n if n else 0.0

    def to_json(self) -> dict:
        return {
            "guard_hits": self.guard_hits,
            "guard_misses": self.guard_misses,
            "guard_hit_rate": self.guard_hit_rate,
            "flow_hits": self.flow_hits,
            "flow_misses": self.flow_misses,
            "flow_hit_rate": self.flow_hit_rate,
            "guard_entries": self.guard_entries,
            "flow_entries": self.flow_entries,
            "size_bytes": self.size_bytes,
        }


def cache_header(automaton: HybridAutomaton, engine: str | None = None) -> dict:
    sc = automaton.scenario
    return {
        "schema": SCHEMA,
        "delta": sc.delta,
        "dt": sc.dt,
        "engine": engine or sc.engine,
        "map": sc.map.name,
        "sensor": sc.sensor.to_config(),
    }


class Caches:
    """Both caches plus the analysis settings they are valid for."""

    def __init__(self, header: dict | None = None):
        self.header = header
        self.guard = GuardCache()
        self.flow = FlowCache()

    def clear(self) -> None:
        self.guard = GuardCache()
        self.flow = FlowCache()

    def adopt(self, header: dict) -> bool:
        """Bind to ``header``; clears the caches and returns False on a mismatch."""
        if self.header is not None and self.header != header:
            log.warning("cache built for %s, now %s; starting cold", self.header, header)
            self.clear()
            self.header = header
            return False
        self.header = header
        return True

    def to_json(self) -> dict:
        return {"header": self.header, "guard": self.guard.to_json(), "flow": self.flow.to_json()}

    def stats(self, since: CacheStats | None = None) -> CacheStats:
        """Counters since the caches were created, or since the ``since`` snapshot."""
        gh, gm, fh, fm = self.guard.hits, self.guard.misses, self.flow.hits, self.flow.misses
        if since is not None:
            gh, gm = gh - since.guard_hits, gm - since.guard_misses
            fh, fm = fh - since.flow_hits, fm - since.flow_misses
        return CacheStats(gh, gm, fh, fm, len(self.guard.entries), len(self.flow),
                          len(json.dumps(self.to_json())))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Caches:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        out = cls(doc.get("header"))
        out.guard.load_json(doc.get("guard", []))
        out.flow.load_json(doc.get("flow", []))
        return out


def _mode_key(automaton: HybridAutomaton, i: int, mode: ModePair) -> tuple:
    a = automaton.agents[i]
    return (a.kind.name, repr(a.params), mode.tactical, mode.track)


def _run(explorer: Explorer, caches: Caches, read: bool, init=None) -> tuple[ExecutionTree, CacheStats]:
    automaton = explorer.automaton
    caches.adopt(cache_header(automaton, explorer.tree.engine))
    before = caches.stats()

    def flow_fn(i: int, rect: HyperRect, mode: ModePair) -> AgentTube:
        key = _mode_key(automaton, i, mode)
        if read:
            tube = caches.flow.get(key, rect)
            if tube is not None:
                return tube
        tube = explorer.flow(i, rect, mode)
        caches.flow.put(key, rect, tube)
        return tube

    def disc_fn(node: TreeNode, end, jt: JointTransition):
        key = GuardCache.key(node, jt)
        if read:
            entry = caches.guard.get(key)
            if entry is not None:
                return entry.verdict, entry.child
        verdict, child = explorer.disc(node, end, jt)
        caches.guard.put(key, GuardEntry(verdict, child))
        return verdict, child

    tree = explorer.run(flow_fn, disc_fn, init)
    return tree, caches.stats(since=before)


def verify_inc(
    automaton: HybridAutomaton, caches: Caches, engine: str | None = None, read: bool = True,
    max_nodes: int = MAX_NODES,
) -> tuple[ExecutionTree, CacheStats]:
    """Verify while reusing and extending ``caches``; stats cover this run only.

    With ``read=False`` every result is computed afresh and only recorded,
    which gives the same tree as plain verification.
    """
    return _run(Explorer(automaton, "verify", engine, max_nodes), caches, read)


def simulate_inc(
    automaton: HybridAutomaton, caches: Caches, initial=None, read: bool = True,
    max_nodes: int = MAX_NODES,
) -> tuple[ExecutionTree, CacheStats]:
    """Branching simulation backed by ``caches`` (bound to the simulation engine)."""
    init = initial_points(automaton, initial)
    return _run(PointExplorer(automaton, "simulate", "simulation", max_nodes), caches, read, init)
