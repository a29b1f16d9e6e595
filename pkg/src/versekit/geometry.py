"""Interval arithmetic and axis-aligned boxes.

Boxes are closed: two boxes that touch on a face intersect in a degenerate
box. Points are boxes with ``lo == hi``. Plain 64-bit floats throughout, no
outward rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


class GeometryError(ValueError):
    """Raised on malformed intervals, dimension mismatches and bad bloat widths."""


@dataclass(frozen=True, slots=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if math.isnan(self.lo) or math.isnan(self.hi) or self.lo > self.hi:
            raise GeometryError(f"invalid interval [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, x: float) -> Interval:
        return cls(x, x)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains_value(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def contains(self, other: Interval) -> bool:
        return self.lo <= other.lo and other.hi <= self.hi

    def intersect(self, other: Interval) -> Interval | None:
        lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
        return Interval(lo, hi) if lo <= hi else None

    def hull(self, other: Interval) -> Interval:
        return Interval(min(self.lo, other.lo), max(self.hi, other.hi))

    def __add__(self, other: Interval) -> Interval:
        return Interval(self.lo + other.lo, self.hi + other.hi)

    def __sub__(self, other: Interval) -> Interval:
        return Interval(self.lo - other.hi, self.hi - other.lo)

    def __neg__(self) -> Interval:
        return Interval(-self.hi, -self.lo)

    def __mul__(self, other: Interval) -> Interval:
        products = (
            self.lo * other.lo,
            self.lo * other.hi,
            self.hi * other.lo,
            self.hi * other.hi,
        )
        return Interval(min(products), max(products))

    def __truediv__(self, other: Interval) -> Interval:
        if other.lo <= 0.0 <= other.hi:
            raise ZeroDivisionError(f"divisor interval [{other.lo}, {other.hi}] contains 0")
        return self * Interval(1.0 / other.hi, 1.0 / other.lo)

    def __repr__(self) -> str:
        return f"[{self.lo!r}, {self.hi!r}]"


@dataclass(frozen=True, slots=True)
class HyperRect:
    """Axis-aligned box stored as parallel lower and upper bound tuples."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) == 0 or len(self.lo) != len(self.hi):
            raise GeometryError("a box needs matching, nonempty bound vectors")
        for a, b in zip(self.lo, self.hi):
            if math.isnan(a) or math.isnan(b) or a > b:
                raise GeometryError(f"invalid bounds lo={self.lo} hi={self.hi}")

    @classmethod
    def from_bounds(cls, lo: Iterable[float], hi: Iterable[float]) -> HyperRect:
        return cls(tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    @classmethod
    def from_intervals(cls, dims: Sequence[Interval]) -> HyperRect:
        return cls(tuple(d.lo for d in dims), tuple(d.hi for d in dims))

    @classmethod
    def point(cls, x: Iterable[float]) -> HyperRect:
        x = tuple(float(v) for v in x)
        return cls(x, x)

    @property
    def ndim(self) -> int:
        return len(self.lo)

    @property
    def dims(self) -> list[Interval]:
        return [Interval(a, b) for a, b in zip(self.lo, self.hi)]

    def interval(self, i: int) -> Interval:
        return Interval(self.lo[i], self.hi[i])

    def widths(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def center(self) -> tuple[float, ...]:
        return tuple(0.5 * (a + b) for a, b in zip(self.lo, self.hi))

    def is_point(self) -> bool:
        return self.lo == self.hi

    def contains_point(self, x: Sequence[float], tol: float = 0.0) -> bool:
        return all(a - tol <= v <= b + tol for a, b, v in zip(self.lo, self.hi, x))

    def replace(self, i: int, iv: Interval) -> HyperRect:
        lo, hi = list(self.lo), list(self.hi)
        lo[i], hi[i] = iv.lo, iv.hi
        return HyperRect(tuple(lo), tuple(hi))

    def slice(self, start: int, stop: int) -> HyperRect:
        return HyperRect(self.lo[start:stop], self.hi[start:stop])

    def concat(self, other: HyperRect) -> HyperRect:
        return HyperRect(self.lo + other.lo, self.hi + other.hi)

    def __repr__(self) -> str:
        return " x ".join(f"[{a:g}, {b:g}]" for a, b in zip(self.lo, self.hi))


@dataclass(frozen=True, slots=True)
class TimedRect:
    t_lo: float
    t_hi: float
    rect: HyperRect

    def __post_init__(self):
        if not (0.0 <= self.t_lo <= self.t_hi):
            raise GeometryError(f"invalid time span [{self.t_lo}, {self.t_hi}]")


def _check_dims(a: HyperRect, b: HyperRect) -> None:
    if a.ndim != b.ndim:
        raise GeometryError(f"dimension mismatch: {a.ndim} vs {b.ndim}")


def contains(outer: HyperRect, inner: HyperRect) -> bool:
    _check_dims(outer, inner)
    return all(
        ol <= il and ih <= oh
        for ol, oh, il, ih in zip(outer.lo, outer.hi, inner.lo, inner.hi)
    )


def intersect(a: HyperRect, b: HyperRect) -> HyperRect | None:
    """Closed intersection, or ``None`` when some dimension is disjoint."""
    _check_dims(a, b)
    lo = tuple(max(x, y) for x, y in zip(a.lo, b.lo))
    hi = tuple(min(x, y) for x, y in zip(a.hi, b.hi))
    if any(l > h for l, h in zip(lo, hi)):
        return None
    return HyperRect(lo, hi)


def hull(a: HyperRect, b: HyperRect) -> HyperRect:
    _check_dims(a, b)
    return HyperRect(
        tuple(min(x, y) for x, y in zip(a.lo, b.lo)),
        tuple(max(x, y) for x, y in zip(a.hi, b.hi)),
    )


def hull_all(rects: Iterable[HyperRect]) -> HyperRect:
    it = iter(rects)
    try:
        out = next(it)
    except StopIteration:
        raise GeometryError("hull of no boxes") from None
    for r in it:
        out = hull(out, r)
    return out


def bloat(r: HyperRect, eps: float | Sequence[float]) -> HyperRect:
    """Widen every dimension ``i`` by ``eps[i]`` on both sides."""
    if isinstance(eps, (int, float)):
        eps = (float(eps),) * r.ndim
    if len(eps) != r.ndim:
        raise GeometryError(f"bloat widths have length {len(eps)}, box has {r.ndim} dims")
    if any(e < 0 or math.isnan(e) for e in eps):
        raise GeometryError(f"bloat widths must be nonnegative, got {tuple(eps)}")
    return HyperRect(
        tuple(a - e for a, e in zip(r.lo, eps)),
        tuple(b + e for b, e in zip(r.hi, eps)),
    )
