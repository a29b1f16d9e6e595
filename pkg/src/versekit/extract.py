"""Transitions, asserts and guard evaluation over boxes.

A checked decision function is flattened into one :class:`TransitionSpec`
per branch that assigns ``ego.tactical_mode``. Guards are evaluated with
interval arithmetic and Kleene three-valued logic, so a guard over a box is
either definitely true, definitely false, or unknown.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, fields as dc_fields, is_dataclass
from typing import Callable, Sequence

from .dsl import (
    AgentRef, Assert, Assign, Attr, BinOp, BoolOp, Call, CheckedProgram, Compare, Const,
    DslError, Expr, GenExp, If, Name, Num, Return, Span, Str, TRACK_CLASS, Unary,
)
from .geometry import HyperRect, Interval


class ExtractionError(DslError):
    kind = "extract"


class EvalError(DslError):
    kind = "eval"


class TriBool(enum.Enum):
    TRUE = "DefTrue"
    FALSE = "DefFalse"
    UNKNOWN = "Unknown"

    @classmethod
    def of(cls, value: bool) -> TriBool:
        return cls.TRUE if value else cls.FALSE

    def __and__(self, other: TriBool) -> TriBool:
        if self is TriBool.FALSE or other is TriBool.FALSE:
            return TriBool.FALSE
        if self is TriBool.TRUE and other is TriBool.TRUE:
            return TriBool.TRUE
        return TriBool.UNKNOWN

    def __or__(self, other: TriBool) -> TriBool:
        if self is TriBool.TRUE or other is TriBool.TRUE:
            return TriBool.TRUE
        if self is TriBool.FALSE and other is TriBool.FALSE:
            return TriBool.FALSE
        return TriBool.UNKNOWN

    def __invert__(self) -> TriBool:
        if self is TriBool.UNKNOWN:
            return self
        return TriBool.FALSE if self is TriBool.TRUE else TriBool.TRUE


@dataclass(frozen=True)
class TransitionSpec:
    src_tactical: str
    dst_tactical: str
    guard: Expr
    resets: tuple[tuple[str, Expr], ...]
    span: Span
    src_track: str | None = None

    @property
    def fingerprint(self) -> str:
        return fingerprint((self.src_tactical, self.src_track, self.dst_tactical, self.guard))

    @property
    def reset_fingerprint(self) -> str:
        return fingerprint(self.resets)


@dataclass(frozen=True)
class AssertSpec:
    predicate: Expr
    label: str
    span: Span


def _canonical(node) -> object:
    if isinstance(node, Span):
        return None
    if is_dataclass(node):
        return (type(node).__name__,) + tuple(
            _canonical(getattr(node, f.name)) for f in dc_fields(node) if f.name != "span"
        )
    if isinstance(node, (tuple, list)):
        return tuple(_canonical(n) for n in node)
    if isinstance(node, float):
        return repr(node)
    return node


def fingerprint(node) -> str:
    """Structural hash of an AST fragment, ignoring source positions."""
    return hashlib.sha256(repr(_canonical(node)).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ModeLit:
    """A resolved tactical or track mode constant."""

    value: str
    span: Span


EGO = -1  # AgentRef index standing for the ego agent


def resolve_names(e: Expr, checked: CheckedProgram) -> Expr:
    """Bind ``ego`` to an agent reference and mode constants to literals."""
    classes = set(checked.program.modes)

    def go(e):
        if isinstance(e, Name):
            if e.id == checked.ego:
                return AgentRef(EGO, e.span)
            if e.id in checked.track_modes:
                return ModeLit(e.id, e.span)
            return e
        if isinstance(e, Attr):
            if isinstance(e.value, Name) and (e.value.id in classes or e.value.id == TRACK_CLASS):
                return ModeLit(e.attr, e.span)
            return Attr(go(e.value), e.attr, e.span)
        if isinstance(e, Unary):
            return Unary(e.op, go(e.operand), e.span)
        if isinstance(e, BinOp):
            return BinOp(e.op, go(e.left), go(e.right), e.span)
        if isinstance(e, BoolOp):
            return BoolOp(e.op, tuple(go(v) for v in e.values), e.span)
        if isinstance(e, Compare):
            return Compare(go(e.first), e.ops, tuple(go(r) for r in e.rest), e.span)
        if isinstance(e, Call):
            return Call(e.func, tuple(go(a) for a in e.args), e.span)
        if isinstance(e, GenExp):
            return GenExp(go(e.elt), e.var, e.iter, tuple(go(c) for c in e.conds), e.span)
        return e

    return go(e)


# ---------------------------------------------------------------------------
# Quantifier unrolling


def _substitute(e: Expr, var: str, ref: AgentRef) -> Expr:
    if isinstance(e, Name):
        return ref if e.id == var else e
    if isinstance(e, Attr):
        return Attr(_substitute(e.value, var, ref), e.attr, e.span)
    if isinstance(e, Unary):
        return Unary(e.op, _substitute(e.operand, var, ref), e.span)
    if isinstance(e, BinOp):
        return BinOp(e.op, _substitute(e.left, var, ref), _substitute(e.right, var, ref), e.span)
    if isinstance(e, BoolOp):
        return BoolOp(e.op, tuple(_substitute(v, var, ref) for v in e.values), e.span)
    if isinstance(e, Compare):
        return Compare(
            _substitute(e.first, var, ref), e.ops, tuple(_substitute(r, var, ref) for r in e.rest), e.span
        )
    if isinstance(e, Call):
        return Call(e.func, tuple(_substitute(a, var, ref) for a in e.args), e.span)
    if isinstance(e, GenExp):
        if e.var == var:  # shadowed
            return e
        return GenExp(
            _substitute(e.elt, var, ref), e.var, e.iter, tuple(_substitute(c, var, ref) for c in e.conds), e.span
        )
    return e


def unroll_quantifiers(expr: Expr, k: int, others: str = "others") -> Expr:
    """Replace ``any``/``all`` over ``others`` by (k-1)-way ``or``/``and``.

    The bound variable becomes :class:`AgentRef` ``j`` for the j-th other
    agent. With no others, ``any`` is ``False`` and ``all`` is ``True``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")

    def go(e: Expr) -> Expr:
        if isinstance(e, Call) and isinstance(e.func, Name) and e.func.id in ("any", "all"):
            gen = e.args[0] if e.args else None
            if not isinstance(gen, GenExp) or not (isinstance(gen.iter, Name) and gen.iter.id == others):
                raise ExtractionError("quantifiers may only range over the others collection", e.span)
            is_any = e.func.id == "any"
            terms = []
            for j in range(k - 1):
                ref = AgentRef(j, gen.span)
                body = _substitute(gen.elt, gen.var, ref)
                conds = [_substitute(c, gen.var, ref) for c in gen.conds]
                if conds:
                    # any(P for o in xs if C) == or_j (C_j and P_j); all(...) == and_j (not C_j or P_j)
                    c = conds[0] if len(conds) == 1 else BoolOp("and", tuple(conds), gen.span)
                    body = BoolOp("and", (c, body), gen.span) if is_any else BoolOp(
                        "or", (Unary("not", c, gen.span), body), gen.span
                    )
                terms.append(go(body))
            if not terms:
                return Const(not is_any, e.span)
            if len(terms) == 1:
                return terms[0]
            return BoolOp("or" if is_any else "and", tuple(terms), e.span)
        if isinstance(e, Attr):
            return Attr(go(e.value), e.attr, e.span)
        if isinstance(e, Unary):
            return Unary(e.op, go(e.operand), e.span)
        if isinstance(e, BinOp):
            return BinOp(e.op, go(e.left), go(e.right), e.span)
        if isinstance(e, BoolOp):
            return BoolOp(e.op, tuple(go(v) for v in e.values), e.span)
        if isinstance(e, Compare):
            return Compare(go(e.first), e.ops, tuple(go(r) for r in e.rest), e.span)
        if isinstance(e, Call):
            return Call(e.func, tuple(go(a) for a in e.args), e.span)
        return e

    return go(expr)


# ---------------------------------------------------------------------------
# Extraction


def _conjuncts(e: Expr) -> list[Expr]:
    if isinstance(e, BoolOp) and e.op == "and":
        out = []
        for v in e.values:
            out.extend(_conjuncts(v))
        return out
    return [e]


def _mode_atom(e: Expr, ego: str, mode_classes: set[str], track_modes: frozenset[str]):
    """Return ("tactical"|"track", constant) for ``ego.<mode> == CONST``."""
    if not (isinstance(e, Compare) and len(e.ops) == 1 and e.ops[0] == "=="):
        return None
    for lhs, rhs in ((e.first, e.rest[0]), (e.rest[0], e.first)):
        if isinstance(lhs, Attr) and isinstance(lhs.value, Name) and lhs.value.id == ego:
            if lhs.attr == "tactical_mode":
                if isinstance(rhs, Attr) and isinstance(rhs.value, Name) and rhs.value.id in mode_classes:
                    return ("tactical", rhs.attr)
            elif lhs.attr == "track_mode":
                c = _track_const(rhs, track_modes)
                if c is not None:
                    return ("track", c)
    return None


def _track_const(e: Expr, track_modes: frozenset[str]) -> str | None:
    if isinstance(e, Name) and e.id in track_modes:
        return e.id
    if isinstance(e, Attr) and isinstance(e.value, Name) and e.value.id == TRACK_CLASS:
        return e.attr
    return None


def _and(conds: Sequence[Expr], span: Span) -> Expr:
    if not conds:
        return Const(True, span)
    if len(conds) == 1:
        return conds[0]
    return BoolOp("and", tuple(conds), span)


def extract_transitions(checked: CheckedProgram, k: int) -> tuple[list[TransitionSpec], list[AssertSpec]]:
    """Flatten the decision function into transitions and asserts for ``k`` agents."""
    try:
        return _extract(checked, k)
    except DslError as exc:
        if exc.filename is None:
            exc.filename = checked.program.filename
        raise


def _extract(checked: CheckedProgram, k: int) -> tuple[list[TransitionSpec], list[AssertSpec]]:
    ego = checked.ego
    mode_classes = set(checked.program.modes)
    fn = checked.decision
    records: list[tuple[list[Expr], str, Span, list[tuple[str, Expr]]]] = []
    asserts: list[AssertSpec] = []

    def walk(stmts, conds: list[Expr], top: bool) -> None:
        block_resets = [
            (s.target.attr, s.value)
            for s in stmts
            if isinstance(s, Assign) and s.target.attr != "tactical_mode"
        ]
        if top and block_resets:
            raise ExtractionError(
                "continuous assignment outside any branch", next(
                    s.span for s in stmts if isinstance(s, Assign) and s.target.attr != "tactical_mode"
                ), checked.program.filename,
            )
        for s in stmts:
            if isinstance(s, If):
                walk(s.body, conds + [s.test], False)
                if s.orelse:
                    neg = []
                    if _mode_atom(s.test, ego, mode_classes, checked.track_modes):
                        neg.append(Unary("not", s.test, s.test.span))
                    walk(s.orelse, conds + neg, False)
            elif isinstance(s, Assign) and s.target.attr == "tactical_mode":
                records.append((conds, s.value.attr, s.span, block_resets))
            elif isinstance(s, Assert):
                label = s.msg.value if isinstance(s.msg, Str) else f"assert@{s.span.line}"
                pred = s.test
                if conds:
                    pred = BoolOp("or", (Unary("not", _and(conds, s.span), s.span), pred), s.span)
                pred = unroll_quantifiers(resolve_names(pred, checked), k, checked.others)
                asserts.append(AssertSpec(pred, label, s.span))
            elif isinstance(s, Return):
                pass

    walk(fn.body, [], True)

    transitions: list[TransitionSpec] = []
    for conds, dst, span, resets in records:
        src = track = None
        rest: list[Expr] = []
        for c in [a for cond in conds for a in _conjuncts(cond)]:
            atom = _mode_atom(c, ego, mode_classes, checked.track_modes)
            if atom is None:
                rest.append(c)
            elif atom[0] == "tactical":
                if src is not None and src != atom[1]:
                    src = "<contradiction>"
                src = atom[1] if src is None else src
            else:
                if track is not None and track != atom[1]:
                    track = "<contradiction>"
                track = atom[1] if track is None else track
        if src is None:
            raise ExtractionError(
                "ambiguous source mode: branch assigns tactical_mode without testing it",
                span,
                checked.program.filename,
            )
        if src == "<contradiction>" or track == "<contradiction>":
            continue
        if dst == src and not resets:
            continue
        guard = unroll_quantifiers(resolve_names(_and(rest, span), checked), k, checked.others)
        unrolled_resets = tuple(
            (f, unroll_quantifiers(resolve_names(v, checked), k, checked.others)) for f, v in resets
        )
        transitions.append(TransitionSpec(src, dst, guard, unrolled_resets, span, track))
    return transitions, asserts


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class GuardEnv:
    """Per-agent boxes (or points) and concrete modes seen from ``ego``."""

    fields: tuple[str, ...]
    positions: tuple[int, ...]
    rects: Sequence  # HyperRect per agent for intervals, float sequences for points
    modes: Sequence[tuple[str, str]]
    ego: int
    track_height: Callable[[str], float] | None = None

    def other(self, j: int) -> int:
        return j if j < self.ego else j + 1


@dataclass(frozen=True)
class _AgentVal:
    index: int


def _err(msg: str, span: Span) -> EvalError:
    return EvalError(msg, span)


class _Evaluator:
    """Shared AST walk; subclasses define the numeric domain."""

    def __init__(self, env: GuardEnv):
        self.env = env
        self.index = {f: i for i, f in enumerate(env.fields)}

    def agent(self, e: Expr):
        if isinstance(e, AgentRef):
            return _AgentVal(self.env.ego if e.index == EGO else self.env.other(e.index))
        return None

    def eval(self, e: Expr):
        env = self.env
        if isinstance(e, Num):
            return self.const(e.value)
        if isinstance(e, Const):
            if isinstance(e.value, bool):
                return TriBool.of(e.value)
            raise _err("None has no value in a guard", e.span)
        if isinstance(e, ModeLit):
            return e.value
        if isinstance(e, AgentRef):
            return self.agent(e)
        if isinstance(e, Attr):
            ag = self.eval(e.value)
            if not isinstance(ag, _AgentVal):
                raise _err("attribute of a non-agent", e.span)
            if e.attr == "tactical_mode":
                return env.modes[ag.index][0]
            if e.attr == "track_mode":
                return env.modes[ag.index][1]
            try:
                return self.field(ag.index, self.index[e.attr])
            except KeyError:
                raise _err(f"unknown field '{e.attr}'", e.span) from None
        if isinstance(e, Name):
            raise _err(f"unresolved name '{e.id}'", e.span)
        if isinstance(e, Unary):
            v = self.eval(e.operand)
            if e.op == "not":
                return ~self.boolean(v, e.span)
            return self.neg(v)
        if isinstance(e, BinOp):
            a, b = self.eval(e.left), self.eval(e.right)
            try:
                return self.arith(e.op, a, b)
            except ZeroDivisionError as exc:
                raise _err(f"division by an interval containing zero ({exc})", e.span) from None
        if isinstance(e, BoolOp):
            out = None
            for v in e.values:
                tv = self.boolean(self.eval(v), v.span)
                out = tv if out is None else (out & tv if e.op == "and" else out | tv)
                if e.op == "and" and out is TriBool.FALSE or e.op == "or" and out is TriBool.TRUE:
                    break
            return out
        if isinstance(e, Compare):
            left = self.eval(e.first)
            out = TriBool.TRUE
            for op, r in zip(e.ops, e.rest):
                right = self.eval(r)
                out = out & self.compare(op, left, right, e.span)
                if out is TriBool.FALSE:
                    break
                left = right
            return out
        if isinstance(e, Call):
            name = e.func.id
            if name == "trackHeight":
                mode = self.eval(e.args[0])
                if env.track_height is None:
                    raise _err("trackHeight() needs a map", e.span)
                return self.const(env.track_height(mode))
            if name == "sameTrack":
                a, b = (self.eval(x) for x in e.args)
                a = env.modes[a.index][1] if isinstance(a, _AgentVal) else a
                b = env.modes[b.index][1] if isinstance(b, _AgentVal) else b
                return TriBool.of(a == b)
            if name == "dist":
                a, b = (self.eval(x) for x in e.args)
                return self.dist(a.index, b.index)
            raise _err(f"unexpanded call to {name}()", e.span)
        raise _err(f"cannot evaluate {type(e).__name__}", e.span)

    @staticmethod
    def boolean(v, span: Span) -> TriBool:
        if not isinstance(v, TriBool):
            raise _err("expected a boolean", span)
        return v

    def compare(self, op: str, a, b, span: Span) -> TriBool:
        if isinstance(a, str) or isinstance(b, str):
            if op == "==":
                return TriBool.of(a == b)
            if op == "!=":
                return TriBool.of(a != b)
            raise _err(f"modes only support == and !=, not {op}", span)
        if isinstance(a, TriBool) or isinstance(b, TriBool):
            if op in ("==", "!="):
                if TriBool.UNKNOWN in (a, b):
                    return TriBool.UNKNOWN
                return TriBool.of((a == b) == (op == "=="))
            raise _err("ordering comparison on booleans", span)
        return self.numeric_compare(op, a, b)


class IntervalEvaluator(_Evaluator):
    def const(self, x: float) -> Interval:
        return Interval(x, x)

    def field(self, agent: int, i: int) -> Interval:
        r = self.env.rects[agent]
        return Interval(r.lo[i], r.hi[i])

    def neg(self, v: Interval) -> Interval:
        return -v

    def arith(self, op: str, a: Interval, b: Interval) -> Interval:
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        return a / b

    def numeric_compare(self, op: str, a: Interval, b: Interval) -> TriBool:
        if op == "<":
            return TriBool.TRUE if a.hi < b.lo else TriBool.FALSE if a.lo >= b.hi else TriBool.UNKNOWN
        if op == "<=":
            return TriBool.TRUE if a.hi <= b.lo else TriBool.FALSE if a.lo > b.hi else TriBool.UNKNOWN
        if op == ">":
            return self.numeric_compare("<", b, a)
        if op == ">=":
            return self.numeric_compare("<=", b, a)
        if op == "==":
            if a.lo == a.hi == b.lo == b.hi:
                return TriBool.TRUE
            return TriBool.FALSE if a.hi < b.lo or b.hi < a.lo else TriBool.UNKNOWN
        return ~self.numeric_compare("==", a, b)

    def dist(self, i: int, j: int) -> Interval:
        total = Interval(0.0, 0.0)
        for p in self.env.positions:
            d = self.field(i, p) - self.field(j, p)
            if d.lo <= 0.0 <= d.hi:
                sq = Interval(0.0, max(d.lo * d.lo, d.hi * d.hi))
            else:
                sq = Interval(min(d.lo * d.lo, d.hi * d.hi), max(d.lo * d.lo, d.hi * d.hi))
            total = total + sq
        return Interval(math.sqrt(total.lo), math.sqrt(total.hi))


class PointEvaluator(_Evaluator):
    def const(self, x: float) -> float:
        return x

    def field(self, agent: int, i: int) -> float:
        return float(self.env.rects[agent][i])

    def neg(self, v: float) -> float:
        return -v

    def arith(self, op: str, a: float, b: float) -> float:
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if b == 0.0:
            raise ZeroDivisionError("division by zero")
        return a / b

    def numeric_compare(self, op: str, a: float, b: float) -> TriBool:
        return TriBool.of(
            {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b, "==": a == b, "!=": a != b}[op]
        )

    def dist(self, i: int, j: int) -> float:
        return math.sqrt(sum((self.field(i, p) - self.field(j, p)) ** 2 for p in self.env.positions))


def eval_interval(expr: Expr, env: GuardEnv):
    """TriBool for boolean expressions, Interval for numeric ones."""
    return IntervalEvaluator(env).eval(expr)


def eval_point(expr: Expr, env: GuardEnv):
    """Concrete evaluation where ``env.rects`` holds one state vector per agent."""
    return PointEvaluator(env).eval(expr)


# ---------------------------------------------------------------------------
# Guard clipping


def _linearize(e: Expr, ev: IntervalEvaluator, ego: int):
    """Return ({field index: coef}, const) or None when ``e`` is not linear in ego fields."""
    if isinstance(e, Num):
        return {}, e.value
    if isinstance(e, Attr) and isinstance(e.value, AgentRef) and e.value.index == EGO:
        if e.attr in ev.index:
            return {ev.index[e.attr]: 1.0}, 0.0
        return None
    if isinstance(e, Call) and isinstance(e.func, Name) and e.func.id == "trackHeight":
        v = ev.eval(e)
        return {}, v.lo
    if isinstance(e, Unary) and e.op == "-":
        inner = _linearize(e.operand, ev, ego)
        if inner is None:
            return None
        return {k: -c for k, c in inner[0].items()}, -inner[1]
    if isinstance(e, BinOp):
        a, b = _linearize(e.left, ev, ego), _linearize(e.right, ev, ego)
        if a is None or b is None:
            return None
        if e.op in ("+", "-"):
            s = 1.0 if e.op == "+" else -1.0
            coefs = dict(a[0])
            for k, c in b[0].items():
                coefs[k] = coefs.get(k, 0.0) + s * c
            return {k: c for k, c in coefs.items() if c != 0.0}, a[1] + s * b[1]
        if e.op == "*" and (not a[0] or not b[0]):
            scale, lin = (a[1], b) if not a[0] else (b[1], a)
            return {k: c * scale for k, c in lin[0].items() if c * scale != 0.0}, lin[1] * scale
        if e.op == "/" and not b[0] and b[1] != 0.0:
            return {k: c / b[1] for k, c in a[0].items()}, a[1] / b[1]
    return None


def _atoms(guard: Expr) -> list[tuple[Expr, str, Expr]]:
    out = []
    for c in _conjuncts(guard):
        if isinstance(c, Compare):
            left = c.first
            for op, right in zip(c.ops, c.rest):
                out.append((left, op, right))
                left = right
    return out


def clip_guard(rect: HyperRect, guard: Expr, env: GuardEnv) -> HyperRect | None:
    """Shrink the ego box to the part that can satisfy ``guard``.

    Only conjunctive atoms linear in at most two ego fields are used; any
    other atom leaves the box as is. Returns ``None`` when the clipped box
    is empty, meaning no point of ``rect`` satisfies the guard.
    """
    rects = list(env.rects)
    rects[env.ego] = rect
    env = GuardEnv(env.fields, env.positions, rects, env.modes, env.ego, env.track_height)
    ev = IntervalEvaluator(env)
    lo, hi = list(rect.lo), list(rect.hi)
    for left, op, right in _atoms(guard):
        if op == "!=":
            continue
        try:
            lin = _linearize(BinOp("-", left, right, left.span), ev, env.ego)
        except (DslError, KeyError, TypeError, AttributeError):
            lin = None
        if lin is None or not lin[0] or len(lin[0]) > 2:
            continue
        coefs, c0 = lin
        for f, cf in coefs.items():
            # cf * f  op  -(c0 + sum_{g != f} cg * g)
            r_lo = r_hi = -c0
            for g, cg in coefs.items():
                if g == f:
                    continue
                a, b = -cg * lo[g], -cg * hi[g]
                r_lo += min(a, b)
                r_hi += max(a, b)
            bounds = []
            if op in ("<", "<=", "=="):
                bounds.append(("le", r_hi))
            if op in (">", ">=", "=="):
                bounds.append(("ge", r_lo))
            for kind, v in bounds:
                x = v / cf
                if (kind == "le") == (cf > 0):
                    hi[f] = min(hi[f], x)
                else:
                    lo[f] = max(lo[f], x)
            if lo[f] > hi[f]:
                return None
    return HyperRect(tuple(lo), tuple(hi))
