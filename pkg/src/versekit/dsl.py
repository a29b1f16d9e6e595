"""Lexer, parser and name checker for the decision-logic language (``.vdl``).

The language is an indentation-sensitive subset of Python. A program holds
mode enumerations declared as classes and a single decision function
``def decide(ego, others): ...`` whose body is built from ``if``/``elif``/
``else``, attribute assignments, ``assert`` and ``return``.
"""

from __future__ import annotations

import ast as _pyast
import difflib
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union


@dataclass(frozen=True, slots=True)
class Span:
    line: int
    col: int
    end_line: int
    end_col: int

    def __str__(self) -> str:
        return f"{self.line}:{self.col}"


class DslError(Exception):
    """Lex, parse or check failure located at ``span``."""

    kind = "dsl"

    def __init__(self, message: str, span: Span | None = None, filename: str | None = None):
        super().__init__(message)
        self.message = message
        self.span = span
        self.filename = filename

    @property
    def line(self) -> int | None:
        return self.span.line if self.span else None

    @property
    def col(self) -> int | None:
        return self.span.col if self.span else None

    def __str__(self) -> str:
        where = self.filename or "<source>"
        if self.span is not None:
            where = f"{where}:{self.span.line}:{self.span.col}"
        return f"{where}: {self.kind} error: {self.message}"


class LexError(DslError):
    kind = "lex"


class ParseError(DslError):
    kind = "syntax"


class CheckError(DslError):
    kind = "check"


# ---------------------------------------------------------------------------
# Tokens

KEYWORDS = {
    "if", "elif", "else", "def", "class", "return", "assert", "and", "or",
    "not", "in", "for", "lambda", "True", "False", "None",
}
# Reserved so the parser can report them as unsupported rather than as names.
UNSUPPORTED_KEYWORDS = {
    "while", "import", "from", "with", "try", "except", "finally", "raise",
    "global", "nonlocal", "yield", "async", "await", "del", "pass", "break",
    "continue", "is", "as",
}

OPERATORS = ("<=", ">=", "==", "!=", "->", "<", ">", "+", "-", "*", "/", "=")
PUNCT = ("(", ")", ",", ":", ".", ";")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ ]+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*"|'(?:[^'\\\n]|\\.)*')
  | (?P<op><=|>=|==|!=|->|[<>+\-*/=])
  | (?P<punct>[(),:.;])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True, slots=True)
class Token:
    kind: str  # NAME NUMBER STRING OP PUNCT KEYWORD NEWLINE INDENT DEDENT EOF
    lexeme: str
    span: Span

    def is_(self, kind: str, lexeme: str | None = None) -> bool:
        return self.kind == kind and (lexeme is None or self.lexeme == lexeme)


def tokenize(source: str, filename: str | None = None) -> list[Token]:
    """Split ``source`` into tokens with synthesized INDENT/DEDENT.

    Newlines inside parentheses are joined. Tabs in indentation are
    rejected. The stream always ends with NEWLINE (if any tokens were
    produced), the pending DEDENTs and EOF.
    """
    tokens: list[Token] = []
    indents = [0]
    depth = 0
    paren_stack: list[Span] = []
    lines = source.split("\n")
    line_no = 0
    for line_no, line in enumerate(lines, start=1):
        pos = 0
        if line.endswith("\r"):
            line = line[:-1]
        if depth == 0:
            stripped = line.lstrip(" ")
            if not stripped.strip() or stripped.startswith("#"):
                continue
            if stripped.startswith("\t"):
                col = len(line) - len(stripped) + 1
                raise LexError("tab in indentation (use spaces)", Span(line_no, col, line_no, col + 1), filename)
            width = len(line) - len(stripped)
            if width > indents[-1]:
                indents.append(width)
                tokens.append(Token("INDENT", "", Span(line_no, 1, line_no, width + 1)))
            elif width < indents[-1]:
                while width < indents[-1]:
                    indents.pop()
                    tokens.append(Token("DEDENT", "", Span(line_no, 1, line_no, width + 1)))
                if width != indents[-1]:
                    raise LexError(
                        "inconsistent dedent: indentation matches no enclosing block",
                        Span(line_no, 1, line_no, width + 1),
                        filename,
                    )
            pos = width
        while pos < len(line):
            m = _TOKEN_RE.match(line, pos)
            if m is None:
                ch = line[pos]
                what = "tab" if ch == "\t" else repr(ch)
                raise LexError(f"illegal character {what}", Span(line_no, pos + 1, line_no, pos + 2), filename)
            kind = m.lastgroup
            text = m.group()
            span = Span(line_no, pos + 1, line_no, m.end() + 1)
            pos = m.end()
            if kind in ("ws", "comment"):
                continue
            if kind == "name":
                kind = "KEYWORD" if text in KEYWORDS or text in UNSUPPORTED_KEYWORDS else "NAME"
            elif kind == "punct":
                kind = "PUNCT"
                if text == "(":
                    depth += 1
                    paren_stack.append(span)
                elif text == ")":
                    if depth == 0:
                        raise LexError("unmatched ')'", span, filename)
                    depth -= 1
                    paren_stack.pop()
            else:
                kind = kind.upper()
            tokens.append(Token(kind, text, span))
        if depth == 0 and tokens and tokens[-1].kind not in ("NEWLINE", "INDENT", "DEDENT"):
            tokens.append(Token("NEWLINE", "", Span(line_no, len(line) + 1, line_no, len(line) + 1)))
    if depth:
        raise LexError("unclosed '('", paren_stack[-1], filename)
    end = Span(max(line_no, 1), 1, max(line_no, 1), 1)
    if tokens and tokens[-1].kind not in ("NEWLINE", "DEDENT"):
        tokens.append(Token("NEWLINE", "", end))
    while len(indents) > 1:
        indents.pop()
        tokens.append(Token("DEDENT", "", end))
    tokens.append(Token("EOF", "", end))
    return tokens


def detokenize(tokens: Iterable[Token]) -> str:
    """Render a token stream back to source text (layout is normalized)."""
    out: list[str] = []
    level = 0
    line: list[str] = []
    for tok in tokens:
        if tok.kind == "INDENT":
            level += 1
        elif tok.kind == "DEDENT":
            level -= 1
        elif tok.kind == "NEWLINE":
            out.append("    " * level + " ".join(line))
            line = []
        elif tok.kind == "EOF":
            break
        else:
            line.append(tok.lexeme)
    if line:
        out.append("    " * level + " ".join(line))
    return "\n".join(out) + ("\n" if out else "")


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float
    span: Span


@dataclass(frozen=True)
class Str:
    value: str
    span: Span


@dataclass(frozen=True)
class Const:
    value: object  # True, False or None
    span: Span


@dataclass(frozen=True)
class Name:
    id: str
    span: Span


@dataclass(frozen=True)
class Attr:
    value: "Expr"
    attr: str
    span: Span


@dataclass(frozen=True)
class AgentRef:
    """Reference to the j-th other agent, produced by quantifier unrolling."""

    index: int
    span: Span


@dataclass(frozen=True)
class Unary:
    op: str  # '-', 'not'
    operand: "Expr"
    span: Span


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * /
    left: "Expr"
    right: "Expr"
    span: Span


@dataclass(frozen=True)
class BoolOp:
    op: str  # 'and' | 'or'
    values: tuple["Expr", ...]
    span: Span


@dataclass(frozen=True)
class Compare:
    first: "Expr"
    ops: tuple[str, ...]
    rest: tuple["Expr", ...]
    span: Span


@dataclass(frozen=True)
class Call:
    func: "Expr"
    args: tuple["Expr", ...]
    span: Span


@dataclass(frozen=True)
class GenExp:
    elt: "Expr"
    var: str
    iter: "Expr"
    conds: tuple["Expr", ...]
    span: Span


@dataclass(frozen=True)
class TupleExpr:
    elts: tuple["Expr", ...]
    span: Span


@dataclass(frozen=True)
class Lambda:
    params: tuple[str, ...]
    body: "Expr"
    span: Span


Expr = Union[Num, Str, Const, Name, Attr, AgentRef, Unary, BinOp, BoolOp, Compare, Call, GenExp, TupleExpr, Lambda]


@dataclass(frozen=True)
class Assign:
    target: Expr
    value: Expr
    span: Span


@dataclass(frozen=True)
class If:
    test: Expr
    body: tuple["Stmt", ...]
    orelse: tuple["Stmt", ...]
    span: Span
    is_elif: bool = False


@dataclass(frozen=True)
class Assert:
    test: Expr
    msg: Expr | None
    span: Span


@dataclass(frozen=True)
class Return:
    value: Expr | None
    span: Span


@dataclass(frozen=True)
class ExprStmt:
    value: Expr
    span: Span


@dataclass(frozen=True)
class FuncDef:
    name: str
    params: tuple[str, ...]
    body: tuple["Stmt", ...]
    span: Span


@dataclass(frozen=True)
class ClassDef:
    name: str
    members: tuple[tuple[str, Span], ...]
    span: Span


Stmt = Union[Assign, If, Assert, Return, ExprStmt, FuncDef, ClassDef]


@dataclass
class Program:
    classes: list[ClassDef] = field(default_factory=list)
    functions: list[FuncDef] = field(default_factory=list)
    filename: str | None = None

    @property
    def modes(self) -> dict[str, list[str]]:
        return {c.name: [m for m, _ in c.members] for c in self.classes}

    @property
    def decision(self) -> FuncDef:
        return self.functions[0]


# ---------------------------------------------------------------------------
# Parser

_COMPARE_OPS = {"<", "<=", ">", ">=", "==", "!="}


def _join(a: Span, b: Span) -> Span:
    return Span(a.line, a.col, b.end_line, b.end_col)


class _Parser:
    def __init__(self, tokens: Sequence[Token], filename: str | None):
        self.toks = list(tokens)
        if not self.toks or self.toks[-1].kind != "EOF":
            last = self.toks[-1].span if self.toks else Span(1, 1, 1, 1)
            self.toks.append(Token("EOF", "", last))
        self.i = 0
        self.filename = filename

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def advance(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "EOF":
            self.i += 1
        return t

    def at(self, kind: str, lexeme: str | None = None) -> bool:
        return self.tok.is_(kind, lexeme)

    def accept(self, kind: str, lexeme: str | None = None) -> Token | None:
        if self.at(kind, lexeme):
            return self.advance()
        return None

    def error(self, message: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(message, tok.span, self.filename)

    def expect(self, kind: str, lexeme: str | None = None) -> Token:
        if self.at(kind, lexeme):
            return self.advance()
        want = repr(lexeme) if lexeme else kind
        return self._fail([want])

    def _fail(self, expected: list[str]):
        t = self.tok
        got = {"EOF": "end of file", "NEWLINE": "end of line", "INDENT": "indent", "DEDENT": "dedent"}.get(
            t.kind, repr(t.lexeme)
        )
        raise self.error(f"expected {' or '.join(expected)}, got {got}")

    def unsupported(self, tok: Token):
        raise self.error(f"unsupported construct '{tok.lexeme}'", tok)

    # module level
    def parse_program(self) -> Program:
        prog = Program(filename=self.filename)
        while not self.at("EOF"):
            if self.accept("NEWLINE"):
                continue
            if self.at("INDENT"):
                raise self.error("unexpected indent")
            if self.at("KEYWORD", "def"):
                prog.functions.append(self.parse_funcdef())
            elif self.at("KEYWORD", "class"):
                prog.classes.append(self.parse_classdef())
            elif self.at("KEYWORD") and self.tok.lexeme in UNSUPPORTED_KEYWORDS:
                self.unsupported(self.tok)
            else:
                raise self.error("only class and def are allowed at top level")
        return prog

    def parse_classdef(self) -> ClassDef:
        start = self.expect("KEYWORD", "class")
        name = self.expect("NAME")
        if self.accept("PUNCT", "("):
            # Base classes such as Enum are accepted and ignored.
            while not self.at("PUNCT", ")"):
                self.parse_expr()
                if not self.accept("PUNCT", ","):
                    break
            self.expect("PUNCT", ")")
        self.expect("PUNCT", ":")
        body = self.parse_block()
        members = []
        for stmt in body:
            if isinstance(stmt, Assign) and isinstance(stmt.target, Name):
                members.append((stmt.target.id, stmt.target.span))
            elif isinstance(stmt, ExprStmt) and isinstance(stmt.value, Name):
                members.append((stmt.value.id, stmt.value.span))
            else:
                raise ParseError(
                    "unsupported construct: classes may only enumerate mode names", stmt.span, self.filename
                )
        return ClassDef(name.lexeme, tuple(members), _join(start.span, name.span))

    def parse_funcdef(self) -> FuncDef:
        start = self.expect("KEYWORD", "def")
        name = self.expect("NAME")
        self.expect("PUNCT", "(")
        params = []
        while not self.at("PUNCT", ")"):
            params.append(self.expect("NAME").lexeme)
            if self.accept("PUNCT", ":"):
                self.parse_expr()  # annotation, ignored
            if not self.accept("PUNCT", ","):
                break
        self.expect("PUNCT", ")")
        if self.accept("OP", "->"):
            self.parse_expr()
        self.expect("PUNCT", ":")
        body = self.parse_block()
        return FuncDef(name.lexeme, tuple(params), tuple(body), _join(start.span, name.span))

    def parse_block(self) -> list[Stmt]:
        if self.accept("NEWLINE"):
            if not self.accept("INDENT"):
                raise self.error("expected an indented block")
            stmts: list[Stmt] = []
            while not self.at("DEDENT") and not self.at("EOF"):
                stmts.extend(self.parse_statement())
            self.expect("DEDENT")
            return stmts
        return self.parse_simple_stmts()

    def parse_statement(self) -> list[Stmt]:
        t = self.tok
        if t.is_("KEYWORD", "if"):
            return [self.parse_if()]
        if t.is_("KEYWORD", "def"):
            raise self.error("unsupported construct: nested function definitions")
        if t.is_("KEYWORD", "class"):
            raise self.error("unsupported construct: classes must be declared at top level")
        if t.kind == "INDENT":
            raise self.error("unexpected indent")
        return self.parse_simple_stmts()

    def parse_if(self) -> If:
        start = self.advance()
        test = self.parse_expr()
        self.expect("PUNCT", ":")
        body = self.parse_block()
        orelse: list[Stmt] = []
        if self.at("KEYWORD", "elif"):
            orelse = [self.parse_if_elif()]
        elif self.accept("KEYWORD", "else"):
            self.expect("PUNCT", ":")
            orelse = self.parse_block()
        return If(test, tuple(body), tuple(orelse), _join(start.span, test.span), start.lexeme == "elif")

    parse_if_elif = parse_if

    def parse_simple_stmts(self) -> list[Stmt]:
        stmts = [self.parse_simple_stmt()]
        while self.accept("PUNCT", ";"):
            if self.at("NEWLINE"):
                break
            stmts.append(self.parse_simple_stmt())
        if not self.at("NEWLINE"):
            self._fail(["end of line"])
        self.advance()
        return stmts

    def parse_simple_stmt(self) -> Stmt:
        t = self.tok
        if t.kind == "KEYWORD":
            if t.lexeme == "return":
                self.advance()
                value = None if self.at("NEWLINE") or self.at("PUNCT", ";") else self.parse_expr()
                return Return(value, t.span)
            if t.lexeme == "assert":
                self.advance()
                test = self.parse_expr()
                msg = self.parse_expr() if self.accept("PUNCT", ",") else None
                return Assert(test, msg, _join(t.span, (msg or test).span))
            if t.lexeme in ("for", "elif", "else", "in"):
                if t.lexeme == "for":
                    self.unsupported(t)
                raise self.error(f"unexpected '{t.lexeme}'")
            if t.lexeme in UNSUPPORTED_KEYWORDS:
                self.unsupported(t)
        expr = self.parse_expr()
        if self.accept("OP", "="):
            if not isinstance(expr, (Name, Attr)):
                raise ParseError("cannot assign to expression", expr.span, self.filename)
            value = self.parse_expr()
            return Assign(expr, value, _join(expr.span, value.span))
        return ExprStmt(expr, expr.span)

    # expressions, lowest precedence first
    def parse_expr(self) -> Expr:
        if self.at("KEYWORD", "lambda"):
            start = self.advance()
            params = []
            while not self.at("PUNCT", ":"):
                params.append(self.expect("NAME").lexeme)
                if not self.accept("PUNCT", ","):
                    break
            self.expect("PUNCT", ":")
            body = self.parse_expr()
            return Lambda(tuple(params), body, _join(start.span, body.span))
        return self.parse_or()

    def parse_or(self) -> Expr:
        left = self.parse_and()
        if not self.at("KEYWORD", "or"):
            return left
        values = [left]
        while self.accept("KEYWORD", "or"):
            values.append(self.parse_and())
        return BoolOp("or", tuple(values), _join(values[0].span, values[-1].span))

    def parse_and(self) -> Expr:
        left = self.parse_not()
        if not self.at("KEYWORD", "and"):
            return left
        values = [left]
        while self.accept("KEYWORD", "and"):
            values.append(self.parse_not())
        return BoolOp("and", tuple(values), _join(values[0].span, values[-1].span))

    def parse_not(self) -> Expr:
        if self.at("KEYWORD", "not"):
            start = self.advance()
            operand = self.parse_not()
            return Unary("not", operand, _join(start.span, operand.span))
        return self.parse_comparison()

    def parse_comparison(self) -> Expr:
        first = self.parse_sum()
        ops, rest = [], []
        while self.tok.kind == "OP" and self.tok.lexeme in _COMPARE_OPS:
            ops.append(self.advance().lexeme)
            rest.append(self.parse_sum())
        if not ops:
            return first
        return Compare(first, tuple(ops), tuple(rest), _join(first.span, rest[-1].span))

    def parse_sum(self) -> Expr:
        left = self.parse_term()
        while self.tok.kind == "OP" and self.tok.lexeme in ("+", "-"):
            op = self.advance().lexeme
            right = self.parse_term()
            left = BinOp(op, left, right, _join(left.span, right.span))
        return left

    def parse_term(self) -> Expr:
        left = self.parse_unary()
        while self.tok.kind == "OP" and self.tok.lexeme in ("*", "/"):
            op = self.advance().lexeme
            right = self.parse_unary()
            left = BinOp(op, left, right, _join(left.span, right.span))
        return left

    def parse_unary(self) -> Expr:
        if self.at("OP", "-") or self.at("OP", "+"):
            start = self.advance()
            operand = self.parse_unary()
            if start.lexeme == "+":
                return operand
            if isinstance(operand, Num):
                return Num(-operand.value, _join(start.span, operand.span))
            return Unary("-", operand, _join(start.span, operand.span))
        return self.parse_postfix()

    def parse_postfix(self) -> Expr:
        expr = self.parse_atom()
        while True:
            if self.accept("PUNCT", "."):
                name = self.expect("NAME")
                expr = Attr(expr, name.lexeme, _join(expr.span, name.span))
            elif self.at("PUNCT", "("):
                open_ = self.advance()
                args: list[Expr] = []
                if not self.at("PUNCT", ")"):
                    first = self.parse_expr()
                    if self.at("KEYWORD", "for"):
                        first = self.parse_genexp_tail(first, open_)
                    args.append(first)
                    while self.accept("PUNCT", ","):
                        if self.at("PUNCT", ")"):
                            break
                        args.append(self.parse_expr())
                close = self.expect("PUNCT", ")")
                expr = Call(expr, tuple(args), _join(expr.span, close.span))
            else:
                return expr

    def parse_genexp_tail(self, elt: Expr, open_: Token) -> GenExp:
        self.expect("KEYWORD", "for")
        var = self.expect("NAME").lexeme
        self.expect("KEYWORD", "in")
        it = self.parse_or()
        conds = []
        while self.accept("KEYWORD", "if"):
            conds.append(self.parse_or())
        if self.at("KEYWORD", "for"):
            raise self.error("unsupported construct: multiple for clauses in one generator")
        return GenExp(elt, var, it, tuple(conds), _join(open_.span, self.tok.span))

    def parse_atom(self) -> Expr:
        t = self.tok
        if t.kind == "NUMBER":
            self.advance()
            return Num(float(t.lexeme), t.span)
        if t.kind == "STRING":
            self.advance()
            parts = [t]
            while self.at("STRING"):
                parts.append(self.advance())
            value = "".join(_pyast.literal_eval(p.lexeme) for p in parts)
            return Str(value, _join(t.span, parts[-1].span))
        if t.kind == "NAME":
            self.advance()
            return Name(t.lexeme, t.span)
        if t.kind == "KEYWORD" and t.lexeme in ("True", "False", "None"):
            self.advance()
            return Const({"True": True, "False": False, "None": None}[t.lexeme], t.span)
        if t.is_("PUNCT", "("):
            self.advance()
            if self.at("PUNCT", ")"):
                close = self.advance()
                return TupleExpr((), _join(t.span, close.span))
            first = self.parse_expr()
            if self.at("KEYWORD", "for"):
                gen = self.parse_genexp_tail(first, t)
                self.expect("PUNCT", ")")
                return gen
            if self.at("PUNCT", ","):
                elts = [first]
                while self.accept("PUNCT", ","):
                    if self.at("PUNCT", ")"):
                        break
                    elts.append(self.parse_expr())
                close = self.expect("PUNCT", ")")
                return TupleExpr(tuple(elts), _join(t.span, close.span))
            self.expect("PUNCT", ")")
            return first
        if t.kind == "KEYWORD" and t.lexeme in UNSUPPORTED_KEYWORDS:
            self.unsupported(t)
        self._fail(["expression"])


def parse(tokens: Sequence[Token], filename: str | None = None) -> Program:
    return _Parser(tokens, filename).parse_program()


def parse_source(source: str, filename: str | None = None) -> Program:
    return parse(tokenize(source, filename), filename)


# ---------------------------------------------------------------------------
# Name checking

BUILTINS = {"trackHeight": 1, "sameTrack": 2, "dist": 2, "any": 1, "all": 1}
MODE_FIELDS = ("tactical_mode", "track_mode")
TRACK_CLASS = "TrackMode"


def walk(node) -> Iterable:
    """Yield ``node`` and every AST node below it."""
    yield node
    for name in getattr(node, "__dataclass_fields__", ()):
        child = getattr(node, name)
        if isinstance(child, tuple):
            for c in child:
                if hasattr(c, "__dataclass_fields__") and not isinstance(c, Span):
                    yield from walk(c)
        elif hasattr(child, "__dataclass_fields__") and not isinstance(child, Span):
            yield from walk(child)


@dataclass
class CheckedProgram:
    program: Program
    ego: str
    others: str
    fields: tuple[str, ...]
    track_modes: frozenset[str]

    @property
    def decision(self) -> FuncDef:
        return self.program.decision

    @property
    def tactical_class(self) -> str:
        return self.program.classes[0].name

    @property
    def tactical_modes(self) -> list[str]:
        return [m for m, _ in self.program.classes[0].members]


class _Checker:
    def __init__(self, program: Program, map_modes: set[str], fields: Sequence[str]):
        self.p = program
        self.map_modes = frozenset(map_modes)
        self.fields = tuple(fields)
        self.classes = program.modes
        self.filename = program.filename

    def err(self, msg: str, span: Span) -> CheckError:
        return CheckError(msg, span, self.filename)

    def run(self) -> CheckedProgram:
        p = self.p
        if not p.functions:
            raise self.err("no decision function", Span(1, 1, 1, 1))
        if len(p.functions) > 1:
            raise self.err("exactly one decision function is allowed", p.functions[1].span)
        if not p.classes or p.classes[0].name == TRACK_CLASS:
            raise self.err("no tactical mode enumeration declared", p.functions[0].span)
        for c in p.classes:
            seen = set()
            for m, span in c.members:
                if m in seen:
                    raise self.err(f"duplicate mode '{m}' in {c.name}", span)
                seen.add(m)
            if c.name == TRACK_CLASS:
                for m, span in c.members:
                    if m not in self.map_modes:
                        raise self.err(f"track mode '{m}' is not provided by the map", span)
        fn = p.functions[0]
        if len(fn.params) != 2:
            raise self.err("the decision function takes exactly (ego, others)", fn.span)
        self.ego, self.others = fn.params
        for stmt in fn.body:
            self.stmt(stmt)
        return CheckedProgram(p, self.ego, self.others, self.fields, self.map_modes)

    def stmt(self, s: Stmt) -> None:
        if isinstance(s, If):
            self.expr(s.test, {})
            for b in s.body + s.orelse:
                self.stmt(b)
        elif isinstance(s, Assign):
            t = s.target
            if not (isinstance(t, Attr) and isinstance(t.value, Name) and t.value.id == self.ego):
                raise self.err("only ego fields may be assigned", t.span)
            if t.attr == "track_mode":
                raise self.err("track modes are chosen by the map; assign tactical_mode instead", t.span)
            if t.attr == "tactical_mode":
                if self.mode_const(s.value) is None:
                    raise self.err("tactical_mode must be assigned a declared mode constant", s.value.span)
                self.expr(s.value, {})
            else:
                self.field(t.attr, t.span)
                self.expr(s.value, {})
        elif isinstance(s, Assert):
            self.expr(s.test, {})
            if s.msg is not None and not isinstance(s.msg, Str):
                raise self.err("assert message must be a string", s.msg.span)
        elif isinstance(s, Return):
            if s.value is not None and not (isinstance(s.value, Name) and s.value.id == self.ego):
                raise self.err("the decision function may only return ego", s.value.span)
        elif isinstance(s, ExprStmt):
            raise self.err("expression statement has no effect", s.span)
        else:
            raise self.err("unsupported statement in decision function", s.span)

    def mode_const(self, e: Expr) -> str | None:
        if isinstance(e, Attr) and isinstance(e.value, Name) and e.value.id in self.classes:
            return e.attr
        return None

    def field(self, name: str, span: Span) -> None:
        if name in self.fields or name in MODE_FIELDS:
            return
        near = difflib.get_close_matches(name, self.fields + MODE_FIELDS, n=1)
        hint = f"; did you mean '{near[0]}'?" if near else ""
        raise self.err(f"unknown field '{name}'{hint}", span)

    def expr(self, e: Expr, bound: dict[str, str]) -> None:
        if isinstance(e, (Num, Const, AgentRef)):
            return
        if isinstance(e, Str):
            raise self.err("string literals are only allowed as assert messages", e.span)
        if isinstance(e, Name):
            if e.id in (self.ego, self.others) or e.id in bound or e.id in self.map_modes:
                return
            if e.id in BUILTINS:
                raise self.err(f"builtin '{e.id}' must be called", e.span)
            raise self.err(f"unknown name '{e.id}'", e.span)
        if isinstance(e, Attr):
            base = e.value
            if isinstance(base, Name):
                if base.id == self.ego or base.id in bound:
                    self.field(e.attr, e.span)
                    return
                if base.id in self.classes:
                    if e.attr not in self.classes[base.id]:
                        raise self.err(f"'{e.attr}' is not a member of {base.id}", e.span)
                    return
                if base.id == TRACK_CLASS:
                    if e.attr not in self.map_modes:
                        raise self.err(f"unknown track mode '{e.attr}'", e.span)
                    return
                if base.id == self.others:
                    raise self.err("others must be quantified with any()/all()", e.span)
            raise self.err("attribute access is only allowed on agents and mode enumerations", e.span)
        if isinstance(e, Unary):
            self.expr(e.operand, bound)
        elif isinstance(e, BinOp):
            self.expr(e.left, bound)
            self.expr(e.right, bound)
        elif isinstance(e, BoolOp):
            for v in e.values:
                self.expr(v, bound)
        elif isinstance(e, Compare):
            self.expr(e.first, bound)
            for r in e.rest:
                self.expr(r, bound)
        elif isinstance(e, Call):
            if not isinstance(e.func, Name) or e.func.id not in BUILTINS:
                raise self.err("only builtin functions can be called", e.func.span)
            fname = e.func.id
            if len(e.args) != BUILTINS[fname]:
                raise self.err(f"{fname}() takes {BUILTINS[fname]} argument(s)", e.span)
            if fname in ("any", "all"):
                gen = e.args[0]
                if not isinstance(gen, GenExp):
                    raise self.err(f"{fname}() expects a generator over others", gen.span)
                if not (isinstance(gen.iter, Name) and gen.iter.id == self.others):
                    raise self.err("quantifiers may only range over others", gen.iter.span)
                inner = dict(bound)
                inner[gen.var] = "agent"
                self.expr(gen.elt, inner)
                for c in gen.conds:
                    self.expr(c, inner)
            elif fname == "trackHeight":
                arg = e.args[0]
                if not self._is_track_const(arg):
                    raise self.err("trackHeight() expects a track mode constant", arg.span)
            elif fname == "dist":
                for a in e.args:
                    if not self._is_agent(a, bound):
                        raise self.err("dist() expects two agents", a.span)
            else:
                for a in e.args:
                    self.expr(a, bound)
        elif isinstance(e, GenExp):
            raise self.err("generator expressions are only allowed inside any()/all()", e.span)
        elif isinstance(e, Lambda):
            raise self.err("unsupported construct: lambda in decision logic", e.span)
        elif isinstance(e, TupleExpr):
            raise self.err("tuples are not values in decision logic", e.span)

    def _is_track_const(self, e: Expr) -> bool:
        if isinstance(e, Name) and e.id in self.map_modes:
            return True
        return (
            isinstance(e, Attr)
            and isinstance(e.value, Name)
            and e.value.id == TRACK_CLASS
            and e.attr in self.map_modes
        )

    def _is_agent(self, e: Expr, bound: dict[str, str]) -> bool:
        return isinstance(e, AgentRef) or (isinstance(e, Name) and (e.id == self.ego or e.id in bound))


def check(program: Program, map_modes: set[str], fields: Sequence[str]) -> CheckedProgram:
    """Resolve every name against the agent schema, mode enums and map."""
    return _Checker(program, map_modes, fields).run()


def load_program(path, map_modes: set[str], fields: Sequence[str]) -> CheckedProgram:
    from pathlib import Path

    path = Path(path)
    source = path.read_text(encoding="utf-8")
    return check(parse_source(source, str(path)), map_modes, fields)
