"""Leak detection, transmitter classification, and the detection engines.

A leak is an architecturally-implied microarchitectural relation missing
from a consistent candidate: per candidate we check

* (a) ``co(w0,w1)`` implies ``cox(w0,w1)`` and ``frx(w0,w1)``;
* (b) co-immediate ``(w0,w1)`` implies the fill edge ``rfx(w0,w1)``;
* (c) ``rf(w,r)`` implies ``rfx(w,r)`` (initial-state rf is not enforced
  for program reads -- a cold miss is not a leak);
* (d) ``fr(r,w)`` implies ``frx(r,w)``;

plus the observer rule: the final observer architecturally reads only the
initial state, so any program event sourcing one of its line fills is a
deviation (gated by ``probe`` -- it is the generic cache probe).

Every program event that fill-sources the receiver is an *address*
transmitter (its line choice leaks its address).  It is promoted to *data*
(resp. *control*) when an extended address (resp. control) chain from some
read -- the access instruction -- targets it: the chain is one addr/ctrl
hop, optionally preceded by stored-then-forwarded value hops (data followed
by rf, or by a same-location fill edge from a store).  It is promoted to
*universal* when the access instruction is itself addr-chain-targeted by an
upstream read and the access's own fill was not alias-mispredicted.

Engines differ only in the speculation primitive they enumerate: ``v1``
(branch windows), ``v4`` (store-to-load bypass), ``psf`` (alias-predicted
store forwarding); ``all`` merges the three reports.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import cfg as cfg_mod
from . import events as ev_mod
from . import executions as ex_mod
from . import ir
from .events import AnalysisTimeout, EventStructure
from .executions import Candidate

CLASSES = ("address", "data", "control", "universal_data", "universal_control")
_SEVERITY = {
    "address": 1,
    "control": 2,
    "data": 3,
    "universal_control": 4,
    "universal_data": 5,
}
_CLASS_TEXT = {
    "address": "address/xstate",
    "data": "data",
    "control": "control",
    "universal_data": "universal data",
    "universal_control": "universal control",
}


@dataclass(frozen=True)
class Culprit:
    kind: str  # rf_without_rfx | co_without_cox_frx | co_imm_without_rfx | fr_without_frx
    edge: tuple[int, int]


@dataclass(frozen=True)
class Transmitter:
    event: int
    klass: str
    transient: bool
    access: int | None = None
    access_transient: bool | None = None
    upstream: int | None = None
    gep: bool = False  # the chain's final addr hop is a computed element access


@dataclass
class LeakWitness:
    cand: Candidate
    culprit: Culprit
    receiver: int
    sources: tuple[int, ...]  # events whose micro-sourcing realizes the deviation
    transmitters: list[Transmitter] = field(default_factory=list)
    # transmitters is unfiltered: every satisfied (event, class) pair

    def transmitter_events(self) -> set[int]:
        return set(self.sources)


def record_sort_key(rec: "Record") -> tuple:
    return (
        rec.label,
        rec.transient,
        _SEVERITY.get(rec.klass, 0),
        rec.access_label or "",
        rec.access_transient or False,
        rec.culprit_kind,
        rec.engine,
        rec.silent or "",
    )


@dataclass(frozen=True)
class Record:
    """One reported finding: dedupable, serializable; sort via record_sort_key."""

    label: str
    transient: bool
    klass: str
    access_label: str | None
    access_transient: bool | None
    culprit_kind: str
    engine: str
    silent: str | None = None  # "definite" | "possible" for silent-store findings

    def line(self) -> str:
        name = f"{self.label}_S" if self.transient else self.label
        bits = [f"transmitter={name}", f"class={self.klass}"]
        if self.access_label is not None:
            acc = (
                f"{self.access_label}_S"
                if self.access_transient
                else self.access_label
            )
            bits.append(f"access={acc}")
        bits.append(f"culprit={self.culprit_kind}")
        if self.silent:
            bits.append(f"silent={self.silent}")
        bits.append(f"engine={self.engine}")
        return "LEAK " + " ".join(bits)


@dataclass(frozen=True)
class RepairElement:
    """One witness occurrence with the fence slots that would kill it."""

    points: frozenset[tuple[str, int]]
    record: Record


@dataclass
class Report:
    engine: str
    records: list[Record]
    elements: list[RepairElement]
    unrepairable: list[Record]
    structures: int = 0
    candidates: int = 0
    graphs: list[tuple[str, str]] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


@dataclass
class EngineConfig:
    d_spec: int = 250
    w_size: int | None = None
    classes: frozenset[str] = frozenset({"universal_data"})
    scope: str = "transient"  # "transient" | "any"
    require_gep: bool = False
    silent_stores: bool = False
    probe: bool = True
    deadline: float | None = None
    collect_graphs: bool = False

    def tick(self) -> None:
        if self.deadline is not None and time.monotonic() > self.deadline:
            raise AnalysisTimeout("analysis deadline exceeded")


# --------------------------------------------------------------------------
# detection


def detect_leaks(cand: Candidate, probe: bool = True) -> list[LeakWitness]:
    st = cand.st
    out: list[LeakWitness] = []

    def witness(kind: str, edge, receiver, deviators: list[int]) -> None:
        out.append(
            LeakWitness(cand, Culprit(kind, tuple(edge)), receiver,
                        tuple(deviators))
        )

    # Observer rule: the final observer reads every line from its last
    # writer, architecturally only from the initial state.
    if probe:
        sources = sorted(
            {w for w in cand.bottom_sources.values() if w != 0}
        )
        if sources:
            witness("rf_without_rfx", (0, st.bottom), st.bottom, sources)

    frx = cand.frx()
    cox_pos: dict[str, dict[int, int]] = {
        x: {w: i for i, w in enumerate(order)} for x, order in cand.cox.items()
    }

    def cox_ordered(w0: int, w1: int) -> bool:
        for positions in cox_pos.values():
            if w0 in positions and w1 in positions:
                if positions[w0] < positions[w1]:
                    return True
        return False

    for loc, order in cand.co.items():
        stores = [w for w in order if w != 0]
        for i, w0 in enumerate(stores):
            for j in range(i + 1, len(stores)):
                w1 = stores[j]
                if j == i + 1:
                    if cand.rfx_in.get(w1) == w0:
                        continue
                    if w1 in cand.silent:
                        witness("co_imm_without_rfx", (w0, w1), st.bottom, [w1])
                    elif w0 in cand.silent:
                        witness("co_imm_without_rfx", (w0, w1), st.bottom, [w0])
                    else:
                        actual = cand.rfx_in.get(w1, 0)
                        dev = actual if actual != 0 else w1
                        witness("co_imm_without_rfx", (w0, w1), w1, [dev])
                else:
                    if cox_ordered(w0, w1) and (w0, w1) in frx:
                        continue
                    if w1 in cand.silent or w0 in cand.silent:
                        dev = w1 if w1 in cand.silent else w0
                        witness("co_without_cox_frx", (w0, w1), st.bottom, [dev])
                    else:
                        witness("co_without_cox_frx", (w0, w1), w1, [w1])

    for r, w in sorted(cand.rf.items()):
        if w == 0:
            continue  # cold misses are architecturally silent
        if cand.rfx_in.get(r) == w:
            continue
        if w in cand.silent:
            witness("rf_without_rfx", (w, r), st.bottom, [w])
        else:
            actual = cand.rfx_in.get(r, 0)
            witness("rf_without_rfx", (w, r), r, [actual if actual != 0 else w])

    for r, w in sorted(cand.fr()):
        if (r, w) in frx:
            continue
        if w in cand.silent:
            witness("fr_without_frx", (r, w), st.bottom, [w])
        else:
            actual = cand.rfx_in.get(r, 0)
            witness("fr_without_frx", (r, w), r, [actual if actual != 0 else w])

    return out


# --------------------------------------------------------------------------
# classification


class _Chains:
    """Backward extended-dependency reachability for one candidate.

    ``ext(a, m)`` holds when a read ``a``'s returned value reaches ``m``'s
    address (resp. branch condition feeding ``m``) through alternating
    store/forward hops: the final hop into ``m`` is an addr (resp. ctrl)
    edge, every earlier hop is data followed by rf or by a same-location
    store-to-load fill edge.
    """

    def __init__(self, cand: Candidate, w_size: int | None) -> None:
        self.cand = cand
        st = cand.st
        self.addr = st.addr
        self.addr_gep = st.addr_gep
        self.ctrl = st.ctrl
        self.pos = cand.tfo_positions()
        self.w_size = w_size
        # Value forwarding: architectural rf plus microarchitectural
        # same-location fills whose source is a program store.
        fwd: set[tuple[int, int]] = set()
        for r, w in cand.rf.items():
            if w != 0:
                fwd.add((w, r))
        for e, src in cand.rfx_in.items():
            if src == 0:
                continue
            if cand.access_kind(src) == "W" and (
                cand.location_of(src) == cand.location_of(e)
            ):
                fwd.add((src, e))
        # data;forward composition: read a -> read r via a store.
        self.value_hop: dict[int, set[int]] = {}
        for a, w in st.data:
            for w2, r in fwd:
                if w2 == w:
                    self.value_hop.setdefault(r, set()).add(a)

    def _within(self, member: int, anchor: int) -> bool:
        if self.w_size is None:
            return True
        return abs(self.pos[member] - self.pos[anchor]) <= self.w_size

    def sources(self, target: int, final: str, gep_only: bool, anchor: int) -> set[int]:
        """Reads whose value reaches ``target``; final hop addr or ctrl."""
        final_edges = {
            ("addr", False): self.addr,
            ("addr", True): self.addr_gep,
            ("ctrl", False): self.ctrl,
        }[(final, gep_only)]
        found: set[int] = set()
        frontier = [a for (a, m) in final_edges if m == target and self._within(a, anchor)]
        while frontier:
            a = frontier.pop()
            if a in found:
                continue
            found.add(a)
            for prev in self.value_hop.get(a, ()):  # a's value came via a store
                if prev not in found and self._within(prev, anchor):
                    frontier.append(prev)
        return found

    def address_true(self, eid: int) -> bool:
        site = self.cand.site
        return not (
            site is not None and site.kind == "psf" and eid == site.read
        )


def classify_transmitters(
    cand: Candidate, events: list[int], w_size: int | None = None
) -> list[Transmitter]:
    """Every satisfied (event, class) pair, one Transmitter each."""
    chains = _Chains(cand, w_size)
    st = cand.st
    out: list[Transmitter] = []
    for t in sorted(events):
        ev = st.events[t]
        out.append(Transmitter(t, "address", ev.transient))
        for final, base_klass, universal_klass in (
            ("addr", "data", "universal_data"),
            ("ctrl", "control", "universal_control"),
        ):
            accesses = chains.sources(t, final, False, t)
            if not accesses:
                continue
            gep_accesses = (
                chains.sources(t, final, True, t) if final == "addr" else set()
            )
            rep = _pick(st, accesses)
            out.append(
                Transmitter(
                    t,
                    base_klass,
                    ev.transient,
                    access=rep,
                    access_transient=st.events[rep].transient,
                    gep=bool(gep_accesses),
                )
            )
            uni: list[tuple[int, int, bool]] = []
            for a in sorted(accesses):
                if not chains.address_true(a):
                    continue
                upstream = chains.sources(a, "addr", False, t)
                upstream.discard(a)
                if not upstream:
                    continue
                upstream_gep = chains.sources(a, "addr", True, t)
                upstream_gep.discard(a)
                r = _pick(st, upstream)
                uni.append((a, r, bool(upstream_gep)))
            if uni:
                ordered = sorted(
                    uni, key=lambda x: (st.events[x[0]].transient, x[0])
                )
                a, r, _ = ordered[0]
                out.append(
                    Transmitter(
                        t,
                        universal_klass,
                        ev.transient,
                        access=a,
                        access_transient=st.events[a].transient,
                        upstream=r,
                        gep=any(x[2] for x in uni),
                    )
                )
    return out


def _pick(st: EventStructure, eids: set[int]) -> int:
    return min(eids, key=lambda e: (st.events[e].transient, e))


# --------------------------------------------------------------------------
# fence-point computation (consumed by repair)


def _fence_points(
    cand: Candidate, w: LeakWitness, t: Transmitter
) -> frozenset[tuple[str, int]] | None:
    """Slots strictly between the speculation primitive and the earliest
    transient transmitter among the finding's chain events (the primitive's
    own transient instance does not count -- no slot precedes it)."""
    st = cand.st
    if st.acfg is None or len(st.plans) != 1:
        return None
    plan = st.plans[0]
    members = [m for m in (t.event, t.access, t.upstream) if m is not None]
    transmitters = w.transmitter_events()
    if cand.site is not None:
        prim_step = st.step_of[cand.site.read][1]
        prim_instance = cand.site.read
    else:
        windows = {
            st.events[m].window
            for m in members
            if st.events[m].transient and st.events[m].window is not None
        }
        if not windows:
            return None
        branch = min(windows)
        prim_step = st.step_of[branch][1]
        prim_instance = None
    chain_transient = [
        m
        for m in members
        if st.events[m].transient
        and m != prim_instance
        and (m in transmitters or m == t.event)
    ]
    if not chain_transient:
        return None
    emin_step = min(st.step_of[m][1] for m in chain_transient)
    if emin_step <= prim_step:
        return None
    points = set()
    for sidx in range(prim_step + 1, emin_step + 1):
        step = plan[sidx]
        if step.node is None:
            continue
        node = st.acfg.nodes[step.node]
        points.add((node.func, node.index))
    return frozenset(points)


# --------------------------------------------------------------------------
# engines


_PRIMITIVES = {"v1": "branch", "v4": "stl", "psf": "psf"}


def analyze(
    prog: ir.Program, engine: str, config: EngineConfig
) -> Report:
    """Run one engine (or the merge of all three) over a program."""
    if engine == "all":
        merged = Report(engine="all", records=[], elements=[], unrepairable=[])
        for sub in ("v1", "v4", "psf"):
            rep = analyze(prog, sub, config)
            merged.records.extend(rep.records)
            merged.elements.extend(rep.elements)
            merged.unrepairable.extend(rep.unrepairable)
            merged.structures += rep.structures
            merged.candidates += rep.candidates
        merged.records = sorted(set(merged.records), key=record_sort_key)
        return merged
    if prog.multithread:
        raise ex_mod.ExecutionError(
            f"engine {engine} analyzes single-thread programs only"
        )
    graph = cfg_mod.build_acfg(prog)
    structures = ev_mod.enumerate_event_structures(
        graph, frozenset({_PRIMITIVES[engine]}), config.d_spec, tick=config.tick
    )
    cands = ex_mod.enumerate_candidates(
        structures,
        silent_stores=config.silent_stores,
        d_spec=config.d_spec,
        tick=config.tick,
    )
    report = Report(
        engine=engine,
        records=[],
        elements=[],
        unrepairable=[],
        structures=len(structures),
        candidates=len(cands),
    )
    seen: set[Record] = set()
    for cand in cands:
        config.tick()
        for w in detect_leaks(cand, probe=config.probe):
            w.transmitters = classify_transmitters(
                cand, sorted(w.transmitter_events()), config.w_size
            )
            emitted = _emit(cand, w, report, config, seen)
            if emitted and config.collect_graphs:
                title = f"{engine} witness {len(report.graphs) + 1}"
                report.graphs.append((title, witness_dot(cand, [w], title)))
    report.records = sorted(seen, key=record_sort_key)
    return report


def _emit(
    cand: Candidate,
    w: LeakWitness,
    report: Report,
    config: EngineConfig,
    seen: set[Record],
) -> bool:
    emitted = False
    st = cand.st
    by_event: dict[int, list[Transmitter]] = {}
    for t in w.transmitters:
        by_event.setdefault(t.event, []).append(t)
    for eid, entries in sorted(by_event.items()):
        ev = st.events[eid]
        if config.scope == "transient" and not ev.transient:
            continue
        eligible = [t for t in entries if t.klass in config.classes]
        if config.require_gep:
            eligible = [
                t
                for t in eligible
                if t.klass == "address"
                or (t.klass in ("control", "universal_control") and not t.upstream)
                or t.gep
            ]
        if not eligible:
            continue
        best = max(eligible, key=lambda t: _SEVERITY[t.klass])
        silent = None
        if eid in cand.silent:
            silent = "definite" if ev.silent_definite else "possible"
        rec = Record(
            label=ev.label,
            transient=ev.transient,
            klass=best.klass,
            access_label=st.events[best.access].label if best.access is not None else None,
            access_transient=best.access_transient,
            culprit_kind=w.culprit.kind,
            engine=report.engine,
            silent=silent,
        )
        seen.add(rec)
        emitted = True
        points = _fence_points(cand, w, best)
        if points:
            report.elements.append(RepairElement(points, rec))
        else:
            report.unrepairable.append(rec)
    return emitted


# --------------------------------------------------------------------------
# witness graph output


_EDGE_STYLES = {
    "po": "solid",
    "tfo": "dotted",
    "rf": "solid",
    "co": "solid",
    "fr": "solid",
    "rfx": "solid",
    "cox": "solid",
    "frx": "solid",
    "addr": "dashed",
    "data": "dashed",
    "ctrl": "dashed",
}


def witness_dot(cand: Candidate, witnesses: list[LeakWitness], title: str) -> str:
    """A graph of one candidate with its culprit edges dashed and bold."""
    st = cand.st
    lines = [f'digraph "{title}" {{', "  rankdir=TB;", '  node [shape=box];']

    def name(e: int) -> str:
        if e == 0:
            return "⊤"
        if e == st.bottom:
            return "⊥"
        return st.events[e].display()

    shown: set[int] = {0, st.bottom}
    for order in st.tfo:
        shown.update(order)
    for e in sorted(shown):
        label = name(e)
        extra = ""
        if e not in (0, st.bottom) and st.events[e].transient:
            extra = ' style=dashed'
        lines.append(f'  e{e} [label="{label}"{extra}];')
    culprits = {(w.culprit.kind, w.culprit.edge) for w in witnesses}
    culprit_edges = {edge for _, edge in culprits}
    drawn_culprits: set[tuple[int, int]] = set()

    def emit(rel: str, pairs) -> None:
        for a, b in sorted(pairs):
            style = _EDGE_STYLES.get(rel, "solid")
            attrs = [f'label="{rel}"', f"style={style}"]
            if (a, b) in culprit_edges:
                attrs = [f'label="{rel}"', "style=dashed", "penwidth=2", 'color=red']
                drawn_culprits.add((a, b))
            lines.append(f"  e{a} -> e{b} [{', '.join(attrs)}];")

    for order in st.po:
        emit("po", zip(order, order[1:]))
    for order in st.tfo:
        emit("tfo", zip(order, order[1:]))
    emit("rf", cand.rf_pairs())
    co_imm = set()
    for order in cand.co.values():
        co_imm.update(zip(order, order[1:]))
    emit("co", co_imm)
    emit("fr", cand.fr())
    emit("rfx", cand.rfx_pairs())
    cox_imm = set()
    for order in cand.cox.values():
        cox_imm.update(zip(order, order[1:]))
    emit("cox", cox_imm)
    emit("frx", cand.frx())
    emit("addr", st.addr)
    emit("data", st.data)
    emit("ctrl", st.ctrl)
    # An observer-rule culprit is an implied architectural edge with no
    # relation of its own; draw it anyway so the finding is visible.
    for kind, (a, b) in sorted(culprits):
        if (a, b) in drawn_culprits:
            continue
        rel = kind.split("_", 1)[0]
        lines.append(
            f'  e{a} -> e{b} [label="{rel}", style=dashed, penwidth=2, color=red];'
        )
    lines.append("}")
    return "\n".join(lines)
