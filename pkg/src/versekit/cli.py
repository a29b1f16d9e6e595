"""Command-line front end: ``versekit simulate | verify | plot``.

Every failure prints one line ``error[E_CODE]: message`` on stderr and
exits 1. ``verify`` exits 2 when some assert may be violated.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import io
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

from .dsl import CheckError, DslError, LexError, ParseError
from .geometry import GeometryError
from .incremental import Caches, verify_inc
from .maps import MapError
from .reach import ExecutionTree, ReachError, simulate, verify
from .scenario import ENGINES, ScenarioError, build_automaton, load_scenario

log = logging.getLogger("versekit")

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b",
           "#e377c2", "#17becf", "#bcbd22", "#7f7f7f", "#d62728")
SVG_W, SVG_H, MARGIN = 800, 600, 60
SHOWN_VIOLATIONS = 10


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, (LexError, ParseError)):
        return CliError("E_PARSE", str(exc))
    if isinstance(exc, (CheckError, DslError)):
        return CliError("E_CHECK", str(exc))
    if isinstance(exc, (ScenarioError, MapError, GeometryError)):
        return CliError("E_CONFIG", str(exc))
    if isinstance(exc, ReachError):
        return CliError("E_ENGINE", str(exc))
    if isinstance(exc, OSError):
        return CliError("E_IO", f"{exc.filename or ''}: {exc.strerror or exc}")
    return CliError("E_INTERNAL", f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# Tree documents


def dump_doc(doc: dict) -> str:
    """Canonical text of a tree document; loading and dumping again is lossless."""
    return json.dumps(doc, indent=1) + "\n"


def load_doc(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError("E_TREE", f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict) or "nodes" not in doc or "agents" not in doc:
        raise CliError("E_TREE", f"{path}: not a versekit tree file")
    return doc


def _branch_keys(doc: dict) -> dict[int, tuple]:
    keys: dict[int, tuple] = {}
    for n in doc["nodes"]:  # parents precede children
        base = keys.get(n["parent"], ()) if n["parent"] is not None else ()
        tr = n["transition"]
        keys[n["id"]] = base + ((tr["agent"], *tr["src"], *tr["dst"]),) if tr else base
    return keys


def _leaf_branches(doc: dict) -> dict[int, int]:
    """Color index per node: branches are numbered by their sorted leaf keys."""
    keys = _branch_keys(doc)
    ordered = sorted({keys[n["id"]] for n in doc["nodes"] if not n["children"]})
    index = {k: i for i, k in enumerate(ordered)}
    out = {}
    for n in doc["nodes"]:
        k = keys[n["id"]]
        # inner nodes take the lowest branch that extends them
        out[n["id"]] = index.get(k, min((i for kk, i in index.items() if kk[:len(k)] == k), default=0))
    return out


# ---------------------------------------------------------------------------
# SVG


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _axis_dims(doc: dict, dims: Sequence[str]) -> list[list[tuple[int, int | None]]]:
    """Per axis, the (agent index, joint column) pairs it draws; column None means time."""
    agents = doc["agents"]
    valid = ["t"] + sorted({f for a in agents for f in a["fields"]})
    for d in dims:
        if d not in valid:
            raise CliError("E_DIMS", f"unknown dimension '{d}'; valid names: {', '.join(valid)}")
    offsets, acc = [], 0
    for a in agents:
        offsets.append(acc)
        acc += len(a["fields"])
    axes = []
    for d in dims:
        cols = []
        for i, a in enumerate(agents):
            if d == "t":
                cols.append((i, None))
            elif d in a["fields"]:
                cols.append((i, offsets[i] + a["fields"].index(d)))
        axes.append(cols)
    return axes


def render_svg(doc: dict, dims: Sequence[str], unsafe: Sequence[dict] = ()) -> str:
    if len(dims) != 2:
        raise CliError("E_DIMS", f"need exactly two dimensions, got {len(dims)}")
    xs, ys = _axis_dims(doc, dims)
    agents_x = {i: c for i, c in xs}
    agents_y = {i: c for i, c in ys}
    drawn = sorted(set(agents_x) & set(agents_y))
    colors = _leaf_branches(doc)

    boxes = []  # (color index, x0, x1, y0, y1)
    for n in doc["nodes"]:
        for t_lo, t_hi, lo, hi in n["tube"]:
            for i in drawn:
                cx, cy = agents_x[i], agents_y[i]
                x0, x1 = (t_lo, t_hi) if cx is None else (lo[cx], hi[cx])
                y0, y1 = (t_lo, t_hi) if cy is None else (lo[cy], hi[cy])
                boxes.append((colors[n["id"]], x0, x1, y0, y1))

    regions = []
    for reg in unsafe:
        b = reg.get("bounds", {})
        if all(d == "t" or d in b for d in dims) and any(d != "t" for d in dims):
            regions.append((reg.get("label", "unsafe"), [None if d == "t" else b[d] for d in dims]))

    if boxes:
        xmin = min(b[1] for b in boxes); xmax = max(b[2] for b in boxes)
        ymin = min(b[3] for b in boxes); ymax = max(b[4] for b in boxes)
    else:
        xmin = ymin = 0.0
        xmax = ymax = 1.0
    for _, (bx, by) in regions:
        if bx is not None:
            xmin, xmax = min(xmin, bx[0]), max(xmax, bx[1])
        if by is not None:
            ymin, ymax = min(ymin, by[0]), max(ymax, by[1])
    if xmax - xmin < 1e-9:
        xmin, xmax = xmin - 0.5, xmax + 0.5
    if ymax - ymin < 1e-9:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    pw, ph = SVG_W - 2 * MARGIN, SVG_H - 2 * MARGIN

    def px(x: float) -> float:
        return MARGIN + (x - xmin) / (xmax - xmin) * pw

    def py(y: float) -> float:
        return SVG_H - MARGIN - (y - ymin) / (ymax - ymin) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" '
        f'viewBox="0 0 {SVG_W} {SVG_H}">',
        f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>',
        f'<g id="axes" stroke="black" fill="none">'
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}"/></g>',
        f'<g id="labels" font-family="sans-serif" font-size="12">'
        f'<text x="{SVG_W / 2}" y="{SVG_H - 20}" text-anchor="middle">{dims[0]}</text>'
        f'<text x="20" y="{SVG_H / 2}" text-anchor="middle" transform="rotate(-90 20 {SVG_H / 2})">{dims[1]}</text>'
        f'<text x="{MARGIN}" y="{SVG_H - MARGIN + 15}">{xmin:.6g}</text>'
        f'<text x="{SVG_W - MARGIN}" y="{SVG_H - MARGIN + 15}" text-anchor="end">{xmax:.6g}</text>'
        f'<text x="{MARGIN - 5}" y="{SVG_H - MARGIN}" text-anchor="end">{ymin:.6g}</text>'
        f'<text x="{MARGIN - 5}" y="{MARGIN + 10}" text-anchor="end">{ymax:.6g}</text></g>',
    ]
    out.append('<g id="unsafe" fill="#d62728" fill-opacity="0.25" stroke="#d62728">')
    for label, (bx, by) in regions:
        x0, x1 = bx if bx is not None else (xmin, xmax)
        y0, y1 = by if by is not None else (ymin, ymax)
        out.append(f'<rect x="{_fmt(px(x0))}" y="{_fmt(py(y1))}" width="{_fmt(px(x1) - px(x0))}" '
                   f'height="{_fmt(py(y0) - py(y1))}"><title>{label}</title></rect>')
    out.append("</g>")
    out.append('<g id="tubes" fill-opacity="0.3" stroke-width="0.5">')
    for c, x0, x1, y0, y1 in boxes:
        color = PALETTE[c % len(PALETTE)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in
                       ((px(x0), py(y0)), (px(x1), py(y0)), (px(x1), py(y1)), (px(x0), py(y1))))
        out.append(f'<polygon points="{pts}" fill="{color}" stroke="{color}"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def default_projections(doc: dict) -> list[tuple[str, str]]:
    fields = doc["agents"][0]["fields"] if doc["agents"] else []
    pos = [f for f in fields if f in ("x", "y", "px", "py", "pz", "x1", "x2")]
    if len(pos) < 2:
        return [("t", fields[0])] if fields else []
    projs = [(pos[0], pos[1])]
    if len(pos) >= 3:
        projs += [("t", pos[0]), ("t", pos[2])]
    return projs


# ---------------------------------------------------------------------------
# Outputs


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _traces(tree: ExecutionTree) -> list[str]:
    """One CSV per leaf: the concatenated point trajectory along its path."""
    out = []
    agents = tree.agents
    header = ["t"] + [f"{a.id}.{f}" for a in agents for f in a.kind.fields] + [f"{a.id}.mode" for a in agents]
    for leaf in tree.leaves():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for j, node in enumerate(tree.path(leaf)):
            if node.lo is None:
                break
            t0 = tree.t0(node)
            modes = [f"{m.tactical}/{m.track}" for m in node.modes]
            for k in range(0 if j == 0 else 1, len(node.lo)):
                w.writerow([repr(round(t0 + k * tree.dt, 9))] + [repr(float(v)) for v in node.lo[k]] + modes)
        out.append(buf.getvalue())
    return out


def _report(args, tree: ExecutionTree, wall: float, exit_code: int, cache_stats=None) -> dict:
    errors = [{"node": n.id, "message": n.error} for n in tree.nodes if n.error]
    return {
        "command": args.command,
        "scenario": str(args.config),
        "engine": tree.engine,
        "delta": tree.delta,
        "dt": tree.dt,
        "horizon_steps": tree.horizon_steps,
        "nodes": len(tree.nodes),
        "transitions": tree.transition_count(),
        "branches": [list(b) for b in tree.transition_branches()],
        "violations": [tree.violation_json(v) for v in tree.violations],
        "errors": errors,
        "partial": bool(errors) or tree.incomplete,
        "wall_time": wall,
        "exit_code": exit_code,
        "cache": None if cache_stats is None else cache_stats.to_json(),
    }


def _unsafe_regions(config: Path) -> list[dict]:
    try:
        doc = json.loads(config.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return []
    return list(doc.get("unsafe_regions", []) or [])


def _emit(args, tree: ExecutionTree, out: Path, with_csv: bool) -> dict:
    doc = tree.to_json()
    _write(out / "tree.json", dump_doc(doc))
    if with_csv:
        _write(out / "reachtube.csv", tree.to_csv())
    unsafe = _unsafe_regions(Path(args.config))
    for a, b in default_projections(doc):
        _write(out / f"plot_{a}-{b}.svg", render_svg(doc, (a, b), unsafe))
    return doc


@contextmanager
def _locked(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(str(path) + ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _load_caches(path: Path, clear: bool) -> Caches:
    if clear or not path.exists():
        return Caches()
    try:
        return Caches.load(path)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        log.warning("ignoring unreadable cache %s (%s)", path, exc)
        return Caches()


def _save_caches(caches: Caches, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    caches.save(tmp)
    os.replace(tmp, path)


def _automaton(config: str):
    path = Path(config)
    if not path.is_file():
        raise CliError("E_IO", f"{config}: no such config file")
    return build_automaton(load_scenario(path))


def cmd_simulate(args) -> int:
    aut = _automaton(args.config)
    out = Path(args.output)
    start = time.perf_counter()
    tree = simulate(aut)
    wall = time.perf_counter() - start
    _emit(args, tree, out, with_csv=False)
    for n, text in enumerate(_traces(tree)):
        _write(out / "traces" / f"branch_{n}.csv", text)
    code = EXIT_ERROR if any(n.error for n in tree.nodes) or tree.incomplete else EXIT_OK
    _write(out / "report.json", json.dumps(_report(args, tree, wall, code), indent=1) + "\n")
    print(f"simulate: {len(tree.nodes)} nodes, {tree.transition_count()} transitions, "
          f"{len(tree.transition_branches())} branches -> {out}")
    if code == EXIT_ERROR:
        _fail("E_ENGINE", f"{sum(1 for n in tree.nodes if n.error)} node(s) failed; outputs in {out} are partial")
    return code


def cmd_verify(args) -> int:
    aut = _automaton(args.config)
    out = Path(args.output)
    stats = None
    start = time.perf_counter()
    if args.incremental:
        cache_path = Path(args.cache_path) if args.cache_path else out / "cache.json"
        with _locked(cache_path):
            caches = _load_caches(cache_path, args.cache_clear)
            tree, stats = verify_inc(aut, caches, args.engine)
            _save_caches(caches, cache_path)
    else:
        tree = verify(aut, args.engine)
    wall = time.perf_counter() - start
    _emit(args, tree, out, with_csv=True)
    failed = [n for n in tree.nodes if n.error]
    if failed or tree.incomplete:
        code = EXIT_ERROR
    elif tree.violations:
        code = EXIT_VIOLATION
    else:
        code = EXIT_OK
    _write(out / "report.json", json.dumps(_report(args, tree, wall, code, stats), indent=1) + "\n")
    rows = [("nodes", len(tree.nodes)), ("transitions", tree.transition_count()),
            ("branches", len(tree.transition_branches())), ("violations", len(tree.violations)),
            ("wall time [s]", f"{wall:.2f}")]
    if stats is not None:
        rows += [("guard hit rate", f"{stats.guard_hit_rate:.2%}"), ("flow hit rate", f"{stats.flow_hit_rate:.2%}"),
                 ("cache size [B]", stats.size_bytes)]
    for k, v in rows:
        print(f"{k:<16}{v}")
    for v in tree.violations[:SHOWN_VIOLATIONS]:
        path = " | ".join(tree.branch_key(tree.nodes[v.node])) or "(no transition)"
        print(f"violation: '{v.label}' by {tree.agents[v.agent].id} at t=[{v.t_lo:g}, {v.t_hi:g}] "
              f"({v.verdict.value}) on {path}")
    if len(tree.violations) > SHOWN_VIOLATIONS:
        print(f"... {len(tree.violations) - SHOWN_VIOLATIONS} more in report.json")
    if code == EXIT_ERROR:
        what = f"{len(failed)} node(s) failed" if failed else "node limit reached"
        _fail("E_ENGINE", f"{what}; outputs in {out} are partial")
    return code


def cmd_plot(args) -> int:
    doc = load_doc(args.tree)
    dims = [d.strip() for d in args.dims.split(",") if d.strip()]
    unsafe = _unsafe_regions(Path(args.config)) if args.config else []
    svg = render_svg(doc, dims, unsafe)
    target = Path(args.output) if args.output else Path(args.tree).with_name(f"plot_{'-'.join(dims)}.svg")
    _write(target, svg)
    print(target)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def _fail(code: str, message: str) -> None:
    print(f"error[{code}]: {_one_line(message)}", file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2, which means "violation" here
        raise CliError("E_USAGE", f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="versekit", description="Simulate and verify multi-agent hybrid scenarios.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="branching simulation from the centers of the initial sets")
    s.add_argument("config")
    s.add_argument("-o", "--output", default="out")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="reachtube verification of the scenario's asserts")
    v.add_argument("config")
    v.add_argument("-o", "--output", default="out")
    v.add_argument("--engine", choices=ENGINES, default=None)
    v.add_argument("--incremental", action="store_true", help="reuse and extend a persistent cache")
    v.add_argument("--cache-path", default=None, help="cache file (default: <output>/cache.json)")
    v.add_argument("--cache-clear", action="store_true", help="start from an empty cache")
    v.set_defaults(func=cmd_verify)

    q = sub.add_parser("plot", help="project a tree file onto two dimensions (or one and time)")
    q.add_argument("tree")
    q.add_argument("--dims", required=True, help="comma separated, e.g. px,py or t,pz")
    q.add_argument("-o", "--output", default=None)
    q.add_argument("--config", default=None, help="scenario config whose unsafe_regions are overlaid")
    q.set_defaults(func=cmd_plot)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except KeyboardInterrupt:
        _fail("E_INTERRUPTED", "interrupted")
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - every path must end in one error line
        err = _classify(exc)
        _fail(err.code, err.message)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
