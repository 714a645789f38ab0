"""Command-line front end: parse / enumerate / check / repair / corpus.

Exit codes: 0 = clean (or all corpus rows matched), 1 = leaks found (or
corpus mismatch), 2 = usage, parse, or analysis error.

Reports are deterministic: records are sorted and carry no timestamps;
the one timing footer is suppressed with ``--no-timing``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import cfg as cfg_mod
from . import events as ev_mod
from . import executions as ex_mod
from . import ir
from .events import AnalysisTimeout
from .leakage import CLASSES, EngineConfig, Record, analyze
from .repair import repair

_ENGINES = ("v1", "v4", "psf", "all")
_PRIM_NAMES = {"branch", "stl", "psf"}


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--engine", choices=_ENGINES, default="all")
    p.add_argument("--spec-depth", type=int, default=250, metavar="N",
                   help="speculation window depth bound (default 250)")
    p.add_argument("--w-size", type=int, default=None, metavar="N",
                   help="sliding-window bound on chain member distance")
    p.add_argument("--classes", default="universal_data", metavar="LIST",
                   help="comma-separated transmitter classes to report "
                        f"(default universal_data; all = {','.join(CLASSES)})")
    p.add_argument("--scope", choices=("transient", "any"), default="transient",
                   help="report only transient transmitters (default) or all")
    p.add_argument("--require-gep", action="store_true",
                   help="only chains whose final addr hop is a computed "
                        "element access (benign-pointer filter)")
    p.add_argument("--silent-stores", action="store_true",
                   help="model the silent-store optimization")
    p.add_argument("--no-probe", action="store_true",
                   help="disable the final cache-probe observer rule")
    p.add_argument("--mcm", choices=("tso",), default="tso")
    p.add_argument("--timeout", type=float, default=60.0, metavar="SECONDS",
                   help="per-file analysis budget (default 60)")


def _config(args: argparse.Namespace, collect_graphs: bool = False) -> EngineConfig:
    classes = frozenset(
        c.strip() for c in args.classes.split(",") if c.strip()
    )
    bad = classes - set(CLASSES)
    if bad:
        raise SystemExit(f"error: unknown class {sorted(bad)[0]!r}")
    return EngineConfig(
        d_spec=args.spec_depth,
        w_size=args.w_size,
        classes=classes,
        scope=args.scope,
        require_gep=args.require_gep,
        silent_stores=args.silent_stores,
        probe=not args.no_probe,
        deadline=time.monotonic() + args.timeout if args.timeout else None,
        collect_graphs=collect_graphs,
    )


def _load(path: str) -> ir.Program:
    return ir.parse(Path(path).read_text())


# --------------------------------------------------------------------------
# subcommands


def cmd_parse(args: argparse.Namespace) -> int:
    prog = _load(args.file)
    if args.dump_acfg:
        print(cfg_mod.to_dot(cfg_mod.build_acfg(prog)), end="")
    else:
        print(ir.pretty(prog), end="")
    return 0


def cmd_enumerate(args: argparse.Namespace) -> int:
    prog = _load(args.file)
    config = _config(args)
    prims = frozenset()
    if args.primitives:
        prims = frozenset(p.strip() for p in args.primitives.split(","))
        bad = prims - _PRIM_NAMES
        if bad:
            raise SystemExit(f"error: unknown primitive {sorted(bad)[0]!r}")
    graph = cfg_mod.build_acfg(prog)
    structures = ev_mod.enumerate_event_structures(
        graph, prims, config.d_spec, tick=config.tick
    )
    cands = ex_mod.enumerate_candidates(
        structures, silent_stores=config.silent_stores,
        d_spec=config.d_spec, tick=config.tick,
    )
    print(f"{len(structures)} event structures, "
          f"{len(cands)} consistent candidate executions")
    if args.show:
        for i, cand in enumerate(cands, start=1):
            print(f"--- candidate {i}")
            print(cand.describe())
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    prog = _load(args.file)
    config = _config(args, collect_graphs=bool(args.dot))
    started = time.monotonic()
    report = analyze(prog, args.engine, config)
    for line in report.lines():
        print(line)
    if args.dot:
        outdir = Path(args.dot)
        outdir.mkdir(parents=True, exist_ok=True)
        for i, (_, text) in enumerate(report.graphs, start=1):
            (outdir / f"witness_{i:03d}.dot").write_text(text)
    n = len(report.records)
    print(f"{args.file}: {n} leak record(s)" if n else f"{args.file}: no leaks")
    if not args.no_timing:
        print(f"[{time.monotonic() - started:.3f}s]", file=sys.stderr)
    return 1 if report.records else 0


def cmd_repair(args: argparse.Namespace) -> int:
    prog = _load(args.file)
    config = _config(args)
    plan = repair(prog, args.engine, config)
    for fp in plan.fences:
        print(f"FENCE lfence before {fp}")
    for rec in plan.unrepairable:
        print(f"UNREPAIRABLE {rec.line()}")
    for rec in plan.residual:
        print(f"RESIDUAL {rec.line()}")
    status = "repaired" if plan.success else "incomplete"
    minimal = {True: "minimal", False: "NOT minimal", None: "unchecked"}[plan.minimal]
    print(f"{args.file}: {status}, {len(plan.fences)} fence(s), "
          f"{plan.iterations} iteration(s), {minimal}")
    if args.output:
        Path(args.output).write_text(ir.pretty(plan.program))
    elif plan.fences:
        print(ir.pretty(plan.program), end="")
    return 0 if plan.success else 1


# --------------------------------------------------------------------------
# corpus runner


@dataclass
class CorpusRow:
    name: str
    expected: str
    detected: str
    ok: bool
    note: str = ""


def _sidecar_config(data: dict, args: argparse.Namespace) -> tuple[str, EngineConfig]:
    conf = data.get("config", {})
    classes = frozenset(conf.get("classes", ["universal_data"]))
    return conf.get("engine", "all"), EngineConfig(
        d_spec=conf.get("d_spec", 250),
        w_size=conf.get("w_size"),
        classes=classes,
        scope=conf.get("scope", "transient"),
        require_gep=conf.get("require_gep", False),
        silent_stores=conf.get("silent_stores", False),
        probe=conf.get("probe", True),
        deadline=time.monotonic() + args.timeout if args.timeout else None,
    )


_FOOTNOTE_MARKS = {"semantic": "¹", "loop": "²"}
_CLASS_ABBREV = {
    "address": "A", "data": "D", "control": "C",
    "universal_data": "U_D", "universal_control": "U_C",
}


def _record_key(rec: Record) -> tuple:
    return (rec.label, rec.transient, rec.klass)


def _expected_key(exp: dict) -> tuple:
    return (exp["label"], bool(exp.get("transient", False)), exp["class"])


def _format_classes(entries: list[tuple[str, list[str]]]) -> str:
    parts = []
    for klass, footnotes in entries:
        text = _CLASS_ABBREV.get(klass, klass)
        marks = "".join(_FOOTNOTE_MARKS.get(f, "?") for f in footnotes)
        parts.append(f"({text}){marks}" if marks else text)
    seen: list[str] = []
    for p in parts:
        if p not in seen:
            seen.append(p)
    return ", ".join(seen) if seen else "(none)"


def _run_one(path: Path, args: argparse.Namespace) -> CorpusRow:
    sidecar = path.with_suffix(".expect.json")
    try:
        data = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        engine, config = _sidecar_config(data, args)
        prog = ir.parse(path.read_text())
        report = analyze(prog, engine, config)
    except AnalysisTimeout:
        return CorpusRow(path.stem, "?", "TIMEOUT", False, "timeout")
    except Exception as exc:  # parse errors, engine rejections
        return CorpusRow(path.stem, "?", "ERROR", False, str(exc))
    expected = data.get("expect", [])
    exp_keys = {_expected_key(e) for e in expected}
    got_keys = {_record_key(r) for r in report.records}
    ok = exp_keys == got_keys
    # Detail checks: expected access labels / culprit kinds must match.
    for e in expected:
        if "access" in e and ok:
            ok = any(
                _record_key(r) == _expected_key(e)
                and r.access_label == e["access"]
                and (e.get("access_transient") is None
                     or r.access_transient == e["access_transient"])
                for r in report.records
            )
        if "culprit" in e and ok:
            ok = any(
                _record_key(r) == _expected_key(e)
                and r.culprit_kind == e["culprit"]
                for r in report.records
            )
    footnotes = {
        _expected_key(e): e.get("footnotes", []) for e in expected
    }
    exp_fmt = _format_classes(
        [(e["class"], e.get("footnotes", [])) for e in expected]
    )
    got_fmt = _format_classes(
        [(r.klass, footnotes.get(_record_key(r), [])) for r in report.records]
    )
    return CorpusRow(path.stem, exp_fmt, got_fmt, ok)


def cmd_corpus(args: argparse.Namespace) -> int:
    root = Path(args.dir)
    files = sorted(root.rglob("*.lcm"))
    if not files:
        print(f"{args.dir}: no litmus files found", file=sys.stderr)
        return 2
    started = time.monotonic()
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(lambda p: _run_one(p, args), files))
    else:
        rows = [_run_one(p, args) for p in files]
    rows.sort(key=lambda r: r.name)
    width = max(len(r.name) for r in rows)
    ew = max(len("expected"), max(len(r.expected) for r in rows))
    print(f"{'program':<{width}}  {'expected':<{ew}}  detected")
    mismatches = 0
    for r in rows:
        mark = "ok" if r.ok else "MISMATCH"
        note = f"  ({r.note})" if r.note else ""
        print(f"{r.name:<{width}}  {r.expected:<{ew}}  {r.detected}"
              f"  [{mark}]{note}")
        mismatches += 0 if r.ok else 1
    print(f"{len(rows)} programs, {mismatches} mismatch(es)")
    if not args.no_timing:
        print(f"[{time.monotonic() - started:.3f}s]", file=sys.stderr)
    return 1 if mismatches else 0


# --------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    top = argparse.ArgumentParser(
        prog="leakcheck",
        description="Microarchitectural leakage analysis for litmus programs.",
    )
    sub = top.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("parse", help="validate and pretty-print a program")
    p.add_argument("file")
    p.add_argument("--dump-acfg", action="store_true",
                   help="print the abstract CFG as graphviz dot")
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("enumerate",
                       help="count event structures and consistent candidates")
    p.add_argument("file")
    p.add_argument("--primitives", default="", metavar="LIST",
                   help="speculation primitives: branch,stl,psf (default none)")
    p.add_argument("--show", action="store_true",
                   help="print each candidate's relations")
    _add_engine_flags(p)
    p.set_defaults(fn=cmd_enumerate)

    p = sub.add_parser("check", help="run detection engines on one program")
    p.add_argument("file")
    p.add_argument("--dot", metavar="DIR",
                   help="write one witness graph per reported leak")
    p.add_argument("--no-timing", action="store_true")
    _add_engine_flags(p)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("repair", help="insert a minimal set of lfences")
    p.add_argument("file")
    p.add_argument("--output", metavar="FILE",
                   help="write the fenced program here instead of stdout")
    _add_engine_flags(p)
    p.set_defaults(fn=cmd_repair)

    p = sub.add_parser("corpus",
                       help="run a directory of litmus files against "
                            "expected-outcome sidecars")
    p.add_argument("dir")
    p.add_argument("--jobs", type=int, default=1, metavar="N")
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--timeout", type=float, default=60.0, metavar="SECONDS")
    p.set_defaults(fn=cmd_corpus)

    args = top.parse_args(argv)
    try:
        return args.fn(args)
    except ir.ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except AnalysisTimeout:
        print("error: analysis timed out", file=sys.stderr)
        return 2
    except (cfg_mod.CfgError, ex_mod.ExecutionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
