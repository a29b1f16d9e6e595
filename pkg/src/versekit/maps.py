"""Maps: lanes (persistent track modes), transition tracks and the mode-transition function.

A map has an ordered list of lanes ``T0, T1, ...``. Adjacent lanes ``a`` and
``b`` get the transition track mode ``M<a><b>``. In 2-D maps lanes are laterally
offset copies of a reference curve; in 3-D maps they are vertically stacked
layers. Lower lane index means "left" (2-D) or "up" (3-D).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class MapError(ValueError):
    pass


LANE_SPACING = 3.0  # m, 2-D built-ins
LAYER_SPACING = 1.0  # units, 3-D built-ins
LEAD_DISTANCE = 15.0  # m, longitudinal lead of 2-D transition tracks
LAYER_LEAD = 2.0  # along-track lead of 3-D layer changes
SAMPLE_STEP = 0.1  # arc-length resolution of lane polylines
WINDOW_AHEAD = 25.0  # arc length of the track window handed to controllers
WINDOW_POINTS = 51
PROJECT_STRIDE = 10  # coarse vertex stride of lane projection
HEADING_WEIGHT = 4.0  # m^2 penalty per unit of (1 - cos) heading mismatch

DEFAULT_SWITCHES = {
    2: {"SwitchLeft": -1, "SwitchRight": 1},
    3: {"MoveUp": -1, "MoveDown": 1},
}
KEEP_MODE = "Normal"


# ---------------------------------------------------------------------------
# Reference curves


def _straight(params: dict, s: np.ndarray) -> np.ndarray:
    x0, y0 = params.get("start", [0.0, 0.0])[:2]
    heading = params.get("heading", 0.0)
    return np.stack([x0 + s * math.cos(heading), y0 + s * math.sin(heading)], axis=1)


def _arc(params: dict, offset: float, s: np.ndarray) -> np.ndarray:
    """Straight run, left-turning circular arc, straight tail; offset shrinks the radius."""
    x0, y0 = params.get("start", [0.0, 0.0])[:2]
    h0 = params.get("heading", 0.0)
    l1 = params["straight"]
    radius = params["radius"] - offset
    angle = params["angle"]
    l2 = params.get("tail", 0.0)
    if radius <= 0:
        raise MapError("arc radius must stay positive after lane offset")
    out = np.empty((len(s), 2))
    # start point is offset laterally to the left of the reference start
    sx, sy = x0 - offset * math.sin(h0), y0 + offset * math.cos(h0)
    arc_len = radius * angle
    for i, si in enumerate(s):
        if si <= l1:
            out[i] = sx + si * math.cos(h0), sy + si * math.sin(h0)
            continue
        ex, ey = sx + l1 * math.cos(h0), sy + l1 * math.sin(h0)
        cx, cy = ex - radius * math.sin(h0), ey + radius * math.cos(h0)
        phi = min(si - l1, arc_len) / radius
        px = cx + radius * math.sin(h0 + phi)
        py = cy - radius * math.cos(h0 + phi)
        if si - l1 <= arc_len:
            out[i] = px, py
        else:
            t = si - l1 - arc_len
            h = h0 + angle
            out[i] = px + t * math.cos(h), py + t * math.sin(h)
    return out


def _figure8(params: dict, u: np.ndarray) -> np.ndarray:
    cx, cy = params.get("center", [0.0, 0.0])[:2]
    r = params["radius"]
    return np.stack([cx + r * np.sin(u), cy + r * np.sin(u) * np.cos(u)], axis=1)


@dataclass
class Lane:
    id: str
    kind: str
    params: dict
    offset: float
    dim: int
    points: np.ndarray = field(repr=False, default=None)
    arclen: np.ndarray = field(repr=False, default=None)
    closed: bool = False

    def __post_init__(self):
        if self.points is None:
            self._sample()

    def _sample(self) -> None:
        k = self.kind
        if k == "straight":
            length = float(self.params["length"])
            s = np.arange(0.0, length + 1e-9, SAMPLE_STEP)
            xy = _straight(self.params, s)
            if self.dim == 2:
                h = self.params.get("heading", 0.0)
                xy = xy + self.offset * np.array([-math.sin(h), math.cos(h)])
        elif k == "arc":
            if self.dim != 2:
                raise MapError("arc lanes are 2-D only")
            length = self.params["straight"] + (self.params["radius"] - self.offset) * self.params["angle"]
            length += self.params.get("tail", 0.0)
            s = np.arange(0.0, length + 1e-9, SAMPLE_STEP)
            xy = _arc(self.params, self.offset, s)
        elif k == "figure8":
            if self.dim != 3:
                raise MapError("figure8 lanes are 3-D only")
            u = np.linspace(0.0, 2 * math.pi, int(self.params.get("samples", 4000)), endpoint=False)
            xy = _figure8(self.params, u)
            xy = np.vstack([xy, xy[:1]])
            self.closed = True
        else:
            raise MapError(f"unknown lane geometry kind '{k}'")
        if self.dim == 3:
            xy = np.hstack([xy, np.full((len(xy), 1), float(self.offset))])
        seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
        self.points = xy
        self.arclen = np.concatenate([[0.0], np.cumsum(seg)])
        self._prepare()

    def _prepare(self) -> None:
        self._a = self.points[:-1]
        self._ab = self.points[1:] - self._a
        denom = np.einsum("ij,ij->i", self._ab, self._ab)
        self._denom = np.where(denom == 0, 1.0, denom)
        self._seglen = np.sqrt(self._denom)

    @property
    def length(self) -> float:
        return float(self.arclen[-1])

    def project(self, p: Sequence[float], heading: Sequence[float] | None = None) -> float:
        """Arc length of the point on this lane nearest to ``p``.

        With a ``heading`` hint, segments pointing against it are penalized,
        which picks the right branch where a closed lane crosses itself.
        """
        p = np.asarray(p, dtype=float)[None, :]
        h = None if heading is None else np.asarray(heading, dtype=float)[None, :]
        return float(self.project_many(p, h)[0])

    def _penalty(self, heading: np.ndarray | None, n: int, tangents: np.ndarray) -> np.ndarray | float:
        if heading is None:
            return 0.0
        h = np.zeros((n, self.dim))
        hh = np.asarray(heading, dtype=float)[:, : self.dim]
        h[:, : hh.shape[1]] = hh
        h[:, 2:] = 0.0
        hn = np.linalg.norm(h, axis=1)
        ok = hn > 1e-9
        cos = np.einsum("nd,n...d->n...", h, tangents) / np.where(ok, hn, 1.0).reshape((-1,) + (1,) * (tangents.ndim - 2))
        return np.where(ok.reshape((-1,) + (1,) * (tangents.ndim - 2)), HEADING_WEIGHT * (1.0 - cos), 0.0)

    def project_many(self, p: np.ndarray, heading: np.ndarray | None = None) -> np.ndarray:
        """Vectorized :meth:`project` over rows of ``p`` (and of ``heading``).

        A coarse pass over every ``PROJECT_STRIDE``-th vertex picks a
        neighborhood, then the segments around it are searched exactly.
        """
        p = np.asarray(p, dtype=float)[:, : self.dim]
        n, k = len(p), len(self._a)
        unit = self._ab / self._seglen[:, None]
        coarse = np.arange(0, k, PROJECT_STRIDE)
        dv = np.einsum("nkd,nkd->nk", p[:, None] - self._a[coarse][None], p[:, None] - self._a[coarse][None])
        dv = dv + self._penalty(heading, n, np.broadcast_to(unit[coarse], (n, len(coarse), self.dim)))
        c = coarse[np.argmin(dv, axis=1)]
        idx = c[:, None] + np.arange(-2 * PROJECT_STRIDE, 2 * PROJECT_STRIDE + 1)[None]
        idx = np.mod(idx, k) if self.closed else np.clip(idx, 0, k - 1)
        a, ab = self._a[idx], self._ab[idx]
        ap = p[:, None, :] - a
        t = np.clip(np.einsum("nkd,nkd->nk", ap, ab) / self._denom[idx], 0.0, 1.0)
        diff = t[..., None] * ab - ap
        d = np.einsum("nkd,nkd->nk", diff, diff) + self._penalty(heading, n, unit[idx])
        j = np.argmin(d, axis=1)
        rows = np.arange(n)
        i = idx[rows, j]
        return self.arclen[i] + t[rows, j] * (self.arclen[i + 1] - self.arclen[i])

    def at(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.closed:
            s = np.mod(s, self.length)
        else:
            s = np.clip(s, 0.0, self.length)
        return np.stack([np.interp(s, self.arclen, self.points[:, j]) for j in range(self.dim)], axis=-1)

    def tangent(self, s: float) -> np.ndarray:
        d = self.at(np.array([s + 0.05])) - self.at(np.array([s - 0.05]))
        if not self.closed:
            if s - 0.05 < 0:
                d = self.at(np.array([0.1])) - self.at(np.array([0.0]))
            elif s + 0.05 > self.length:
                d = self.at(np.array([self.length])) - self.at(np.array([self.length - 0.1]))
        d = d[0]
        n = np.linalg.norm(d)
        return d / n if n > 0 else d

    def to_json(self) -> dict:
        return {"id": self.id, "geometry": {"kind": self.kind, **self.params}, "offset": self.offset}


@dataclass
class Track:
    """A concrete curve to follow, sampled as a polyline (``s`` in [0, 1] maps along it)."""

    mode: str
    points: np.ndarray  # (K, dim)
    start: np.ndarray

    def sample(self, s: float) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        target = float(np.clip(s, 0.0, 1.0)) * cum[-1]
        return np.array([np.interp(target, cum, self.points[:, j]) for j in range(self.points.shape[1])])


def _hermite(p0, m0, p1, m1, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    h00 = 2 * t**3 - 3 * t**2 + 1
    h10 = t**3 - 2 * t**2 + t
    h01 = -2 * t**3 + 3 * t**2
    h11 = t**3 - t**2
    return h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1


@dataclass
class MapDef:
    name: str
    dim: int
    lanes: list[Lane]
    adjacent: list[tuple[str, str]]
    switches: dict[str, int] = field(default_factory=dict)
    # a free map keeps the track mode under every tactical change
    free: bool = False

    def __post_init__(self):
        if not self.switches:
            self.switches = dict(DEFAULT_SWITCHES[self.dim])
        self._lanes = {l.id: l for l in self.lanes}
        self._order = {l.id: i for i, l in enumerate(self.lanes)}
        self._transitions: dict[str, tuple[str, str]] = {}
        for a, b in self.adjacent:
            for src, dst in ((a, b), (b, a)):
                self._transitions[f"M{src[1:] if src.startswith('T') else src}{dst[1:] if dst.startswith('T') else dst}"] = (src, dst)

    # the map's track-mode alphabet
    @property
    def modes(self) -> set[str]:
        return set(self._lanes) | set(self._transitions)

    @property
    def lane_ids(self) -> list[str]:
        return [l.id for l in self.lanes]

    def is_persistent(self, mode: str) -> bool:
        return mode in self._lanes

    def transition_ends(self, mode: str) -> tuple[str, str]:
        return self._transitions[mode]

    def lane(self, mode: str) -> Lane:
        if mode in self._lanes:
            return self._lanes[mode]
        if mode in self._transitions:
            return self._lanes[self._transitions[mode][1]]
        raise MapError(f"unknown track mode '{mode}'")

    def height(self, mode: str) -> float:
        """Layer height (3-D) or lateral lane offset (2-D) of a track mode's lane."""
        return float(self.lane(mode).offset)

    def _neighbor(self, lane: str, direction: int) -> str | None:
        i = self._order[lane] + direction
        if 0 <= i < len(self.lanes):
            cand = self.lanes[i].id
            if (lane, cand) in self.adjacent or (cand, lane) in self.adjacent:
                return cand
        return None

    def _transition_name(self, src: str, dst: str) -> str:
        for name, ends in self._transitions.items():
            if ends == (src, dst):
                return name
        raise MapError(f"no transition from {src} to {dst}")

    def next_track_mode(self, track: str, p: str, p2: str) -> str:
        """The mode-transition function h(track, p, p2)."""
        if track not in self.modes:
            raise MapError(f"unknown track mode '{track}'")
        if self.is_persistent(track):
            if self.free or (p2 == p and p not in self.switches):
                return track
            if p == KEEP_MODE and p2 in self.switches:
                nb = self._neighbor(track, self.switches[p2])
                if nb is not None:
                    return self._transition_name(track, nb)
        else:
            src, dst = self._transitions[track]
            direction = self._order[dst] - self._order[src]
            if p in self.switches and self.switches[p] == direction:
                if p2 == KEEP_MODE:
                    return dst
                if p2 == p:
                    return track
        raise MapError(f"map {self.name} has no track mode for ({track}, {p}, {p2})")

    def supports(self, track: str, p: str, p2: str) -> bool:
        try:
            self.next_track_mode(track, p, p2)
            return True
        except MapError:
            return False

    def track_for(self, position: Sequence[float], mode: str, heading: Sequence[float] | None = None) -> Track:
        """A concrete track of ``mode`` starting at (or near) ``position``.

        Persistent modes give a window of the lane starting at the projection
        of ``position``. Transition modes give a cubic Hermite curve from
        ``position`` to the destination lane, followed by a stretch of it.
        """
        if mode not in self.modes:
            raise MapError(f"unknown track mode '{mode}'")
        pos = np.asarray(position, dtype=float)[: self.dim]
        if self.is_persistent(mode):
            lane = self._lanes[mode]
            s0 = lane.project(pos, heading)
            hi = s0 + WINDOW_AHEAD
            if not lane.closed:
                hi = min(hi, lane.length)
            s = np.linspace(s0, hi, WINDOW_POINTS) if hi > s0 else np.array([s0, s0])
            pts = lane.at(s)
            if len(pts) < 2 or np.allclose(pts[0], pts[-1]):
                pts = np.vstack([pts[:1], pts[:1] + lane.tangent(s0) * 0.1])
            return Track(mode, pts, pts[0].copy())
        src, dst = self._transitions[mode]
        lane = self._lanes[dst]
        if self.dim == 3:
            s1 = lane.project(pos, heading) + LAYER_LEAD
            if not lane.closed:
                s1 = min(s1, lane.length)
            end = lane.at(np.array([s1]))[0]
            # straight cubic: both Hermite tangents point along the chord
            chord = end - pos
            body = _hermite(pos, chord, end, chord, 21)
        else:
            gap = abs(self._lanes[src].offset - lane.offset) or LANE_SPACING
            s_here = lane.project(pos, heading)
            here = lane.at(np.array([s_here]))[0]
            lateral = float(np.linalg.norm(here - pos))
            lead = max(LEAD_DISTANCE * min(1.0, lateral / gap), 3.0)
            s1 = s_here + lead
            if not lane.closed:
                s1 = min(s1, lane.length)
            end = lane.at(np.array([s1]))[0]
            m0 = self._lanes[src].tangent(self._lanes[src].project(pos, heading)) * lead
            m1 = lane.tangent(s1) * lead
            body = _hermite(pos, m0, end, m1, 101)
        tail_hi = s1 + WINDOW_AHEAD
        if not lane.closed:
            tail_hi = min(tail_hi, lane.length)
        tail = lane.at(np.linspace(s1, tail_hi, 40))[1:] if tail_hi > s1 else np.empty((0, self.dim))
        pts = np.vstack([body, tail])
        return Track(mode, pts, pts[0].copy())

    def track_batch(self, positions: np.ndarray, mode: str, headings: np.ndarray | None = None) -> np.ndarray:
        """Tracks for many positions at once, padded to a common length: (N, K, dim)."""
        positions = np.asarray(positions, dtype=float)[:, : self.dim]
        if self.is_persistent(mode):
            lane = self._lanes[mode]
            s0 = lane.project_many(positions, headings)
            hi = s0 + WINDOW_AHEAD
            if not lane.closed:
                hi = np.minimum(hi, lane.length)
            if np.all(hi - s0 > 1e-6):
                s = s0[:, None] + (hi - s0)[:, None] * np.linspace(0.0, 1.0, WINDOW_POINTS)[None]
                return lane.at(s)
        tracks = [
            self.track_for(p, mode, None if headings is None else headings[i]).points
            for i, p in enumerate(positions)
        ]
        k = max(len(t) for t in tracks)
        out = np.empty((len(tracks), k, self.dim))
        for i, t in enumerate(tracks):
            out[i, : len(t)] = t
            out[i, len(t):] = t[-1]
        return out

    def to_json(self) -> dict:
        out = {
            "dim": self.dim,
            "lanes": [l.to_json() for l in self.lanes],
            "adjacent": [list(p) for p in self.adjacent],
        }
        if self.switches != DEFAULT_SWITCHES[self.dim]:
            out["switches"] = dict(self.switches)
        if self.free:
            out["free"] = True
        return out


# ---------------------------------------------------------------------------
# Built-ins and loading


def _parallel(name: str, n: int, geometry: dict, dim: int, spacing: float, top: float) -> MapDef:
    lanes = [Lane(f"T{i}", geometry["kind"], {k: v for k, v in geometry.items() if k != "kind"},
                  top - i * spacing, dim) for i in range(n)]
    adjacent = [(f"T{i}", f"T{i + 1}") for i in range(n - 1)]
    return MapDef(name, dim, lanes, adjacent)


BUILTIN_MAPS = ("M1", "M2", "M3", "M4", "M5", "M6", "free")


def builtin_map(name: str) -> MapDef:
    straight = {"kind": "straight", "start": [-50.0, 0.0], "heading": 0.0, "length": 400.0}
    if name == "M1":
        return _parallel("M1", 3, straight, 2, LANE_SPACING, LANE_SPACING)
    if name == "M2":
        return _parallel("M2", 5, straight, 2, LANE_SPACING, LANE_SPACING)
    if name == "M3":
        arc = {"kind": "arc", "start": [-50.0, 0.0], "heading": 0.0, "straight": 70.0,
               "radius": 30.0, "angle": math.pi / 2, "tail": 100.0}
        return _parallel("M3", 3, arc, 2, LANE_SPACING, LANE_SPACING)
    if name == "M4":
        raise MapError("import-only map not bundled: M4 comes from OpenDRIVE; describe it as a JSON map")
    if name == "M5":
        line = {"kind": "straight", "start": [-20.0, 0.0], "heading": 0.0, "length": 200.0}
        return _parallel("M5", 3, line, 3, LAYER_SPACING, 3.0)
    if name == "free":
        line = {"start": [0.0, 0.0], "heading": 0.0, "length": 100.0}
        return MapDef("free", 2, [Lane("T0", "straight", line, 0.0, 2)], [], free=True)
    if name == "M6":
        fig8 = {"kind": "figure8", "center": [0.0, 0.0], "radius": 12.0}
        return _parallel("M6", 3, fig8, 3, LAYER_SPACING, 3.0)
    raise MapError(f"unknown built-in map '{name}'")


def _require(doc: dict, key: str, path: str):
    if not isinstance(doc, dict) or key not in doc:
        raise MapError(f"{path}: missing key '{key}'")
    return doc[key]


def _finite(x, path: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise MapError(f"{path}: expected a finite number, got {x!r}")
    return float(x)


def load_map(doc: dict | str | Path, name: str = "custom") -> MapDef:
    """Build a map from its JSON description (a dict, JSON text, or a file path)."""
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        path = Path(doc)
        name = path.stem
        doc = json.loads(path.read_text(encoding="utf-8"))
    elif isinstance(doc, str):
        doc = json.loads(doc)
    dim = _require(doc, "dim", "$")
    if dim not in (2, 3):
        raise MapError(f"$.dim: must be 2 or 3, got {dim!r}")
    raw_lanes = _require(doc, "lanes", "$")
    if not isinstance(raw_lanes, list) or not raw_lanes:
        raise MapError("$.lanes: must be a nonempty list")
    lanes = []
    for i, raw in enumerate(raw_lanes):
        p = f"$.lanes[{i}]"
        lid = _require(raw, "id", p)
        geom = dict(_require(raw, "geometry", p))
        kind = _require(geom, "kind", p + ".geometry")
        if kind not in ("straight", "arc", "figure8"):
            raise MapError(f"{p}.geometry.kind: unknown kind {kind!r}")
        for k, v in geom.items():
            if k == "kind":
                continue
            vals = v if isinstance(v, list) else [v]
            for j, x in enumerate(vals):
                _finite(x, f"{p}.geometry.{k}" + (f"[{j}]" if isinstance(v, list) else ""))
        offset = _finite(_require(raw, "offset", p), p + ".offset")
        del geom["kind"]
        try:
            lanes.append(Lane(str(lid), kind, geom, offset, dim))
        except KeyError as exc:
            raise MapError(f"{p}.geometry: missing key {exc}") from None
    ids = {l.id for l in lanes}
    if len(ids) != len(lanes):
        raise MapError("$.lanes: duplicate lane ids")
    adjacent = []
    for i, pair in enumerate(doc.get("adjacent", [])):
        if not isinstance(pair, list) or len(pair) != 2:
            raise MapError(f"$.adjacent[{i}]: expected a pair of lane ids")
        for j, lid in enumerate(pair):
            if lid not in ids:
                raise MapError(f"$.adjacent[{i}][{j}]: unknown lane '{lid}'")
        adjacent.append((pair[0], pair[1]))
    return MapDef(name, dim, lanes, adjacent, dict(doc.get("switches", {})), bool(doc.get("free", False)))


def resolve_map(ref: str, base: Path | None = None) -> MapDef:
    if ref in BUILTIN_MAPS:
        return builtin_map(ref)
    path = Path(ref)
    if base is not None and not path.is_absolute():
        path = base / path
    return load_map(path)
