"""What each agent sees of the others.

A noisy sensor never perturbs sampled states. Its noise enters only when
guards are checked over sets, as a bloat of the other agents' positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .geometry import HyperRect, bloat


@dataclass(frozen=True)
class SensorDef:
    kind: str = "transparent"
    position_noise: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("transparent", "noisy"):
            raise ValueError(f"unknown sensor kind '{self.kind}'")
        if any(n < 0 for n in self.position_noise):
            raise ValueError("sensor noise bounds must be nonnegative")
        if self.kind == "transparent" and any(self.position_noise):
            raise ValueError("a transparent sensor has no noise")

    @classmethod
    def from_config(cls, doc: dict | None, workspace_dim: int) -> SensorDef:
        doc = doc or {"kind": "transparent"}
        kind = doc.get("kind", "transparent")
        if kind == "transparent":
            return cls()
        noise = doc.get("position_noise", 0.5)
        if isinstance(noise, (int, float)):
            noise = (float(noise),) * workspace_dim
        return cls("noisy", tuple(float(n) for n in noise))

    def to_config(self) -> dict:
        if self.kind == "transparent":
            return {"kind": "transparent"}
        return {"kind": "noisy", "position_noise": list(self.position_noise)}

    def observe(self, ego: int, states: Sequence[Sequence[float]]) -> list:
        """Point observation: the identity for both sensor kinds."""
        return list(states)

    def observe_sets(self, ego: int, rects: Sequence[HyperRect], positions: Sequence[int]) -> list[HyperRect]:
        """Bloat the position dimensions of every agent except ``ego``."""
        if self.kind == "transparent" or not any(self.position_noise):
            return list(rects)
        if len(self.position_noise) != len(positions):
            raise ValueError("sensor noise does not match the workspace dimension")
        out = []
        for i, r in enumerate(rects):
            if i == ego:
                out.append(r)
                continue
            eps = [0.0] * r.ndim
            for p, n in zip(positions, self.position_noise):
                eps[p] = n
            out.append(bloat(r, eps))
        return out
