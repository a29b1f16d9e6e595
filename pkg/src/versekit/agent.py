"""Agent types and their closed-loop flows.

Flows are black boxes mapping an initial state and a mode pair to a trace.
Both built-in agents follow the track chosen by the map for their track
mode: the car with a Stanley steering law, the drone with a PD tracker.
Integration is fixed-step RK4 and works on batches of initial states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import HyperRect
from .maps import MapDef


class FlowError(RuntimeError):
    pass


DEFAULT_DT = 0.05


@dataclass(frozen=True)
class ModePair:
    tactical: str
    track: str

    def __iter__(self):
        return iter((self.tactical, self.track))

    def __str__(self) -> str:
        return f"{self.tactical}/{self.track}"


@dataclass
class Trace:
    dt: float
    times: np.ndarray  # (T,)
    states: np.ndarray  # (T, n)


# ---------------------------------------------------------------------------
# Track geometry on batches


class TrackBatch:
    """Per-sample polylines (N, K, d) with their segment geometry precomputed."""

    def __init__(self, tracks: np.ndarray):
        self.points = tracks
        self.a = tracks[:, :-1]
        self.ab = tracks[:, 1:] - self.a
        denom = np.einsum("nkd,nkd->nk", self.ab, self.ab)
        self.valid = denom > 0
        self.inv = np.where(self.valid, 1.0 / np.where(self.valid, denom, 1.0), 0.0)
        norm = np.sqrt(denom)
        unit = self.ab / np.where(norm > 0, norm, 1.0)[..., None]
        # vertex tangents average the adjacent segments so the tangent is continuous along the track
        vert = np.concatenate([unit[:, :1], unit[:, :-1] + unit[:, 1:], unit[:, -1:]], axis=1)
        vnorm = np.linalg.norm(vert, axis=2, keepdims=True)
        self.vert = vert / np.where(vnorm > 0, vnorm, 1.0)
        self.rows = np.arange(len(tracks))

    def nearest(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ap = p[:, None, :] - self.a
        t = np.clip(np.einsum("nkd,nkd->nk", ap, self.ab) * self.inv, 0.0, 1.0)
        diff = t[..., None] * self.ab - ap
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        # degenerate segments never win
        d2[~self.valid] = np.inf
        idx = np.argmin(d2, axis=1)
        ti = t[self.rows, idx, None]
        q = self.a[self.rows, idx] + ti * self.ab[self.rows, idx]
        tan = (1.0 - ti) * self.vert[self.rows, idx] + ti * self.vert[self.rows, idx + 1]
        norm = np.linalg.norm(tan, axis=1, keepdims=True)
        return q, tan / np.where(norm > 0, norm, 1.0)


def nearest_on_tracks(tracks, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest point and unit tangent on each sample's polyline.

    ``tracks`` is an (N, K, d) array or a prepared :class:`TrackBatch`; ``p`` is (N, d).
    """
    batch = tracks if isinstance(tracks, TrackBatch) else TrackBatch(np.asarray(tracks, dtype=float))
    return batch.nearest(p)


# ---------------------------------------------------------------------------
# Car


@dataclass(frozen=True)
class CarParams:
    wheelbase: float = 1.75
    k_s: float = 0.45
    k_v: float = 1.0
    eps_v: float = 0.1
    delta_max: float = math.radians(30.0)
    speed: float | None = None


def wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def stanley_steering(psi_e, e_ct, v, k_s: float, eps_v: float, delta_max: float | None = None):
    """Stanley law: heading error plus the arctangent of the scaled cross-track error."""
    delta = psi_e + np.arctan(k_s * e_ct / (v + eps_v))
    if delta_max is not None:
        delta = np.clip(delta, -delta_max, delta_max)
    return delta


def car_derivative(state: np.ndarray, steer, v_cmd, params: CarParams = CarParams()) -> np.ndarray:
    """Kinematic bicycle; ``state`` is (..., 4) = (x, y, theta, v)."""
    theta, v = state[..., 2], state[..., 3]
    steer = np.clip(steer, -params.delta_max, params.delta_max)
    return np.stack(
        [
            v * np.cos(theta),
            v * np.sin(theta),
            v / params.wheelbase * np.tan(steer),
            params.k_v * (v_cmd - v),
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# Drone


@dataclass(frozen=True)
class DroneParams:
    k_p: float = 2.0
    k_d: float = 3.0
    a_max: float = 10.0
    speed: float = 1.0


def drone_acceleration(p, v, target, v_ref, params: DroneParams = DroneParams()) -> np.ndarray:
    """PD tracking acceleration with its norm clamped to ``a_max``."""
    a = params.k_p * (np.asarray(target) - p) + params.k_d * (np.asarray(v_ref) - v)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.where(norm > params.a_max, params.a_max / np.where(norm > 0, norm, 1.0), 1.0)
    return a * scale


def drone_derivative(state: np.ndarray, target, v_ref, params: DroneParams = DroneParams()) -> np.ndarray:
    p, v = state[..., :3], state[..., 3:]
    return np.concatenate([v, drone_acceleration(p, v, target, v_ref, params)], axis=-1)


# ---------------------------------------------------------------------------
# Agent types


@dataclass(frozen=True)
class AgentType:
    name: str
    fields: tuple[str, ...]
    positions: tuple[int, ...]
    make_params: Callable[[dict], object]
    closed_loop: Callable  # (states (N,n), tracks (N,K,d) | None, params, x0 (N,n), tactical) -> derivative
    heading: Callable[[np.ndarray], np.ndarray | None] | None = None
    uses_map: bool = True
    # (x, x_hat, w, w_hat, tactical, params) -> dx, for the mixed-monotone engine
    decomposition: Callable | None = None
    disturbance: Callable[[object], tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def ndim(self) -> int:
        return len(self.fields)


def _car_loop(x: np.ndarray, tracks: np.ndarray, params: CarParams, x0: np.ndarray, tactical: str) -> np.ndarray:
    q, t = nearest_on_tracks(tracks, x[:, :2])
    diff = q - x[:, :2]
    e_ct = t[:, 0] * diff[:, 1] - t[:, 1] * diff[:, 0]
    psi_e = wrap_angle(np.arctan2(t[:, 1], t[:, 0]) - x[:, 2])
    steer = stanley_steering(psi_e, e_ct, x[:, 3], params.k_s, params.eps_v, params.delta_max)
    v_cmd = x0[:, 3] if params.speed is None else params.speed
    return car_derivative(x, steer, v_cmd, params)


def _drone_loop(x: np.ndarray, tracks: np.ndarray, params: DroneParams, x0: np.ndarray, tactical: str) -> np.ndarray:
    q, t = nearest_on_tracks(tracks, x[:, :3])
    return drone_derivative(x, q, params.speed * t, params)


def _car_heading(x: np.ndarray):
    return np.stack([np.cos(x[:, 2]), np.sin(x[:, 2])], axis=1)


def _drone_heading(x: np.ndarray):
    return x[:, 3:6]


def _params(cls):
    def make(raw: dict):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown {cls.__name__} parameter(s): {sorted(unknown)}")
        return cls(**raw)

    return make


# ---------------------------------------------------------------------------
# Map-free agents


@dataclass(frozen=True)
class RateParams:
    """Piecewise-constant rates per tactical mode for the 1-D point agent."""

    rates: tuple[tuple[str, float], ...] = (("Inc", 1.0), ("Dec", -1.0))

    def rate(self, tactical: str) -> float:
        return dict(self.rates)[tactical]


def _make_rate_params(raw: dict) -> RateParams:
    rates = raw.get("rates")
    if rates is None:
        return RateParams()
    return RateParams(tuple(sorted((str(k), float(v)) for k, v in rates.items())))


def _point_loop(x, tracks, params: RateParams, x0, tactical: str):
    return np.full_like(x, params.rate(tactical))


@dataclass(frozen=True)
class UncertainParams:
    """Disturbance bounds of the two-state uncertain example system."""

    w_lo: tuple[float, float] = (-0.1, -0.1)
    w_hi: tuple[float, float] = (0.1, 0.1)


def example_system(x, w):
    """x1' = x1 (1.1 + w1 - x1 - 0.1 x2),  x2' = x2 (4 + w2 - 3 x1 - x2)."""
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 * (1.1 + w[..., 0] - x1 - 0.1 * x2), x2 * (4 + w[..., 1] - 3 * x1 - x2)], axis=-1)


def example_decomposition(x, xh, w, wh):
    """Decomposition function d(x, x_hat, w, w_hat) of the example system."""
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack(
        [x1 * (1.1 + w[..., 0] - x1 - 0.1 * xh[..., 1]), x2 * (4 + w[..., 1] - 3 * xh[..., 0] - x2)], axis=-1
    )


def _uncertain_loop(x, tracks, params: UncertainParams, x0, tactical: str):
    # point simulations use the disturbance midpoint
    w = 0.5 * (np.asarray(params.w_lo) + np.asarray(params.w_hi))
    return example_system(x, np.broadcast_to(w, x.shape))


def _make_uncertain(raw: dict) -> UncertainParams:
    return UncertainParams(tuple(raw.get("w_lo", (-0.1, -0.1))), tuple(raw.get("w_hi", (0.1, 0.1))))


AGENT_TYPES: dict[str, AgentType] = {
    "car": AgentType("car", ("x", "y", "theta", "v"), (0, 1), _params(CarParams), _car_loop, _car_heading),
    "drone": AgentType(
        "drone", ("px", "py", "pz", "vx", "vy", "vz"), (0, 1, 2), _params(DroneParams), _drone_loop, _drone_heading
    ),
    "point1d": AgentType("point1d", ("x",), (0,), _make_rate_params, _point_loop, uses_map=False),
    "uncertain2d": AgentType(
        "uncertain2d", ("x1", "x2"), (0, 1), _make_uncertain, _uncertain_loop, uses_map=False,
        decomposition=lambda x, xh, w, wh, tactical, params: example_decomposition(x, xh, w, wh),
        disturbance=lambda params: (np.asarray(params.w_lo, float), np.asarray(params.w_hi, float)),
    ),
}


def register_agent_type(kind: AgentType) -> None:
    AGENT_TYPES[kind.name] = kind


# ---------------------------------------------------------------------------
# Flow


def steps_for(duration: float, dt: float) -> int:
    n = int(round(duration / dt))
    if n <= 0 or abs(n * dt - duration) > 1e-9 * max(1.0, duration):
        raise FlowError(f"duration {duration} is not a positive multiple of dt {dt}")
    return n


def tracks_for(kind: AgentType, x0: np.ndarray, mode: ModePair, map_: MapDef) -> TrackBatch | None:
    if not kind.uses_map:
        return None
    headings = kind.heading(x0) if kind.heading else None
    return TrackBatch(map_.track_batch(x0[:, list(kind.positions)], mode.track, headings))


def flow_batch(
    kind: AgentType, x0: np.ndarray, mode: ModePair, map_: MapDef, duration: float,
    dt: float = DEFAULT_DT, params: object | None = None,
) -> np.ndarray:
    """Integrate N initial states; returns an array of shape (steps + 1, N, n)."""
    if duration <= 0 or dt <= 0 or dt > duration:
        raise FlowError("need duration > 0 and 0 < dt <= duration")
    params = params if params is not None else kind.make_params({})
    x0 = np.array(x0, dtype=float, ndmin=2)
    n_steps = steps_for(duration, dt)
    tracks = tracks_for(kind, x0, mode, map_)
    f = kind.closed_loop
    out = np.empty((n_steps + 1,) + x0.shape)
    out[0] = x = x0
    for step in range(1, n_steps + 1):
        # overflow surfaces as the FlowError below
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = f(x, tracks, params, x0, mode.tactical)
            k2 = f(x + 0.5 * dt * k1, tracks, params, x0, mode.tactical)
            k3 = f(x + 0.5 * dt * k2, tracks, params, x0, mode.tactical)
            k4 = f(x + dt * k3, tracks, params, x0, mode.tactical)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FlowError(f"non-finite state at step {step} (t = {step * dt:g} s) in mode {mode}")
        out[step] = x
    return out


def flow(
    kind: AgentType, x0: Sequence[float], mode: ModePair, map_: MapDef, duration: float,
    dt: float = DEFAULT_DT, params: object | None = None,
) -> Trace:
    states = flow_batch(kind, np.asarray(x0, dtype=float)[None, :], mode, map_, duration, dt, params)[:, 0, :]
    times = np.arange(states.shape[0]) * dt
    return Trace(dt, times, states)


@dataclass
class AgentDef:
    id: str
    kind: AgentType
    logic: object  # dsl.CheckedProgram
    initial: HyperRect
    mode: ModePair
    params: object = None
    logic_path: str | None = None
    raw_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params is None:
            self.params = self.kind.make_params(self.raw_params)
        if self.initial.ndim != self.kind.ndim:
            raise ValueError(
                f"agent {self.id}: initial set has {self.initial.ndim} dims, {self.kind.name} needs {self.kind.ndim}"
            )
        if self.logic is not None and self.mode.tactical not in self.tactical_modes:
            raise ValueError(f"agent {self.id}: initial tactical mode {self.mode.tactical} is not declared")

    @property
    def tactical_modes(self) -> list[str]:
        return self.logic.tactical_modes if self.logic is not None else [self.mode.tactical]

    @property
    def fields(self) -> tuple[str, ...]:
        return self.kind.fields
