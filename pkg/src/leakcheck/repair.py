"""Minimal fence insertion.

Each leak finding carries the set of program points where an ``lfence``
would cut the transient window between its speculation primitive and its
earliest transient transmitter.  Repair computes a minimum-cardinality
hitting set over those point sets (exact branch-and-bound; litmus-scale
instances are tiny), inserts the fences, re-runs the engine, and iterates
until the report is empty or the iteration cap is hit.

Findings without any candidate point (no transient window to cut -- e.g.
silent-store leakage, or a window whose only transient transmitter is the
primitive's own instance) are not fence-repairable and are surfaced as
such rather than silently dropped.

Fence points are (function, instruction index) pairs in the coordinates
of the *original* program; iterated rounds map points found in fenced
programs back through the accumulated insertions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

from . import ir
from .leakage import EngineConfig, Record, Report, analyze, record_sort_key

Point = tuple[str, int]


@dataclass(frozen=True)
class FencePoint:
    func: str
    index: int

    def __str__(self):
        return f"{self.func}:{self.index}"


@dataclass
class RepairPlan:
    fences: list[FencePoint]
    residual: list[Record]
    unrepairable: list[Record]
    iterations: int
    program: ir.Program  # the fenced program
    minimal: bool | None = None  # brute-force result; None = not checked

    @property
    def success(self) -> bool:
        return not self.residual and not self.unrepairable


def _point_key(prog: ir.Program, p: Point) -> tuple[int, int]:
    order = {f.name: i for i, f in enumerate(prog.functions)}
    entry = order.get(prog.entry, 0)
    fi = order.get(p[0], len(order))
    return (0 if fi == entry else 1 + fi, p[1])


def hitting_set(sets: list[frozenset[Point]], order_key) -> set[Point]:
    """Exact minimum hitting set, ties broken toward earlier points."""
    sets = [s for s in sets if s]
    if not sets:
        return set()
    universe = sorted({p for s in sets for p in s}, key=order_key)
    best: list[set[Point]] = [set(universe)]

    def bound(chosen: set[Point], remaining: list[frozenset[Point]]) -> None:
        if len(chosen) >= len(best[0]):
            return
        missed = [s for s in remaining if not (s & chosen)]
        if not missed:
            best[0] = set(chosen)
            return
        # Branch on the points of the hardest-to-hit set, earliest first.
        pivot = min(missed, key=len)
        for p in sorted(pivot, key=order_key):
            bound(chosen | {p}, missed)

    bound(set(), sets)
    return best[0]


def insert_fences(prog: ir.Program, points: set[Point]) -> ir.Program:
    """A copy of ``prog`` with an lfence before each (function, index)."""
    by_func: dict[str, list[int]] = {}
    for f, i in points:
        by_func.setdefault(f, []).append(i)
    functions = []
    for fn in prog.functions:
        body = list(fn.body)
        for i in sorted(by_func.get(fn.name, ()), reverse=True):
            body.insert(i, ir.Instr(ir.Fence("lfence")))
        functions.append(ir.Function(fn.name, fn.params, body))
    return ir.Program(
        functions, prog.entry, prog.aliases, dict(prog.externs), prog.multithread
    )


def _origin_maps(prog: ir.Program, inserted: set[Point]) -> dict[str, list[int]]:
    """For each function of the fenced program: fenced index -> original."""
    by_func: dict[str, list[int]] = {}
    for f, i in inserted:
        by_func.setdefault(f, []).append(i)
    maps: dict[str, list[int]] = {}
    for fn in prog.functions:
        fenced_to_orig: list[int] = []
        ins_at = sorted(by_func.get(fn.name, ()))
        for orig in range(len(fn.body) + 1):
            # fences inserted before `orig` come first, mapping to `orig`
            fenced_to_orig.extend([orig] * ins_at.count(orig))
            if orig < len(fn.body):
                fenced_to_orig.append(orig)
        maps[fn.name] = fenced_to_orig
    return maps


def repair(
    prog: ir.Program,
    engine: str,
    config: EngineConfig,
    max_iterations: int = 10,
    verify_minimal: bool = True,
) -> RepairPlan:
    """Insert a minimum set of lfences until the engine reports nothing."""

    def key(p: Point) -> tuple[int, int]:
        return _point_key(prog, p)

    inserted: set[Point] = set()
    unrepairable: list[Record] = []
    report = analyze(prog, engine, config)
    iterations = 0
    all_points: set[Point] = set()
    while report.records and iterations < max_iterations:
        iterations += 1
        origin = _origin_maps(prog, inserted)
        goals: list[frozenset[Point]] = []
        round_unrepairable: list[Record] = []
        for el in report.elements:
            goals.append(
                frozenset((f, origin[f][i]) for f, i in el.points)
            )
        round_unrepairable.extend(report.unrepairable)
        if not goals:
            unrepairable = sorted(set(round_unrepairable), key=record_sort_key)
            break
        all_points.update(p for s in goals for p in s)
        chosen = hitting_set(goals, key)
        inserted |= chosen
        fenced = insert_fences(prog, inserted)
        report = analyze(fenced, engine, config)
        unrepairable = sorted(set(report.unrepairable), key=record_sort_key)
    fenced = insert_fences(prog, inserted)
    plan = RepairPlan(
        fences=sorted((FencePoint(f, i) for f, i in inserted),
                      key=lambda fp: key((fp.func, fp.index))),
        residual=list(report.records) if report.records else [],
        unrepairable=unrepairable,
        iterations=max(iterations, 1),
        program=fenced,
    )
    if verify_minimal and plan.success and len(all_points) <= 20 and inserted:
        plan.minimal = _verify_minimal(prog, engine, config, inserted)
    elif plan.success and not inserted:
        plan.minimal = True
    return plan


def _verify_minimal(
    prog: ir.Program, engine: str, config: EngineConfig, fences: set[Point]
) -> bool:
    """No strict subset of the chosen fences also silences the engine."""
    for k in range(len(fences)):
        for subset in combinations(sorted(fences), k):
            candidate = insert_fences(prog, set(subset))
            if not analyze(candidate, engine, config).records:
                return False
    return True
