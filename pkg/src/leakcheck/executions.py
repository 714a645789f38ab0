"""Candidate executions: architectural and microarchitectural witnesses.

A candidate pins down, for one event structure, who reads from whom.  The
architectural witness is the usual ``(rf, co)`` pair over committed events
(with ``fr = rf^-1 ; co`` derived); the microarchitectural witness adds, per
extra-architectural state (one cache line per resolved location), the fill
edges ``rfx``, the line-writer order ``cox``, and ``frx = rfx^-1 ; cox``.

Single-thread programs have exactly one TSO witness (each load reads the
last committed same-location store, coherence follows program order), so we
construct it directly.  Multi-thread litmus programs are small; their
witnesses are brute-forced and filtered through the TSO predicates
(per-location SC and causality with the store-to-load relaxation).

The microarchitectural witness is built by one pass over fetch order
simulating an ideal write-allocate cache: every access fills its line from
the previous line writer (the initial state ``TOP`` when untouched), writes
and misses become the new line writer, hits read it.  Three deviations are
modeled on top: a *bypass* candidate forwards a site load from a chosen
stale writer (store-to-load) or from a different location's store (alias
prediction); a *silent* store neither fills nor claims its line.  The final
observer ``BOT`` reads every touched line from its last writer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import networkx as nx

from . import events as ev_mod
from .events import AnalysisTimeout, Event, EventStructure, Site


class ExecutionError(Exception):
    pass


@dataclass
class Candidate:
    st: EventStructure
    rf: dict[int, int]  # committed read -> writer (0 = initial state)
    co: dict[str, list[int]]  # location -> [0, committed writers...]
    rfx_in: dict[int, int]  # event -> line fill source (silent stores absent)
    rfx_xstate: dict[int, int | str]  # event -> the xstate its fill edge is on
    cox: dict[str, list[int]]  # xstate -> [0, line writers in fetch order...]
    xmode: dict[int, str]  # event -> "R" (hit) | "RW" (fill + claim)
    bottom_sources: dict[str, int]  # xstate -> last writer, as read by BOT
    silent: frozenset[int] = frozenset()
    site: Site | None = None  # bypass candidates: site in this structure's ids
    stale_src: int | None = None
    amo: dict[int, tuple[str, str]] = field(default_factory=dict)  # eid -> (kind, loc)

    # -- resolved views ----------------------------------------------------

    def access_kind(self, eid: int) -> str | None:
        """R or W as resolved in this candidate (AMO choices applied)."""
        e = self.st.events[eid]
        if e.kind == "AMO":
            choice = self.amo.get(eid)
            return choice[0] if choice else None
        if e.kind in ("R", "W"):
            return e.kind
        return None

    def location_of(self, eid: int) -> str | None:
        e = self.st.events[eid]
        if e.kind == "AMO":
            choice = self.amo.get(eid)
            return choice[1] if choice else None
        return e.location

    def committed_memory(self) -> list[int]:
        out = []
        for order in self.st.po:
            out.extend(e for e in order if self.access_kind(e) is not None)
        return out

    def global_tfo(self) -> list[int]:
        out: list[int] = []
        for order in self.st.tfo:
            out.extend(order)
        return out

    def tfo_positions(self) -> dict[int, int]:
        return {e: i for i, e in enumerate(self.global_tfo())}

    def fr(self) -> frozenset[tuple[int, int]]:
        pairs = set()
        for r, w in self.rf.items():
            loc = self.location_of(r)
            order = self.co.get(loc, [0])
            start = order.index(w) + 1
            for w2 in order[start:]:
                if w2 != r:
                    pairs.add((r, w2))
        return frozenset(pairs)

    def rf_pairs(self) -> frozenset[tuple[int, int]]:
        return frozenset((w, r) for r, w in self.rf.items())

    def co_pairs(self) -> frozenset[tuple[int, int]]:
        pairs = set()
        for order in self.co.values():
            for i, w1 in enumerate(order):
                for w2 in order[i + 1 :]:
                    pairs.add((w1, w2))
        return frozenset(pairs)

    def cox_pairs(self) -> frozenset[tuple[int, int]]:
        pairs = set()
        for order in self.cox.values():
            for i, w1 in enumerate(order):
                for w2 in order[i + 1 :]:
                    pairs.add((w1, w2))
        return frozenset(pairs)

    def rfx_pairs(self) -> frozenset[tuple[int, int]]:
        pairs = {(src, e) for e, src in self.rfx_in.items()}
        bottom = self.st.bottom
        pairs |= {(w, bottom) for w in self.bottom_sources.values()}
        return frozenset(pairs)

    def frx(self) -> frozenset[tuple[int, int]]:
        pairs = set()
        for e, src in self.rfx_in.items():
            order = self.cox.get(self.rfx_xstate[e])
            if order is None or src not in order:
                continue
            for w2 in order[order.index(src) + 1 :]:
                if w2 != e:
                    pairs.add((e, w2))
        return frozenset(pairs)

    def describe(self) -> str:
        bits = [self.st.describe()]
        if self.site is not None:
            src = "⊤" if self.stale_src == 0 else self.st.events[self.stale_src].display()
            bits.append(f"[{self.site.kind} {self.st.events[self.site.read].display()} <~ {src}]")
        if self.silent:
            names = ",".join(self.st.events[e].display() for e in sorted(self.silent))
            bits.append(f"[silent {names}]")
        return " ".join(bits)


# --------------------------------------------------------------------------
# architectural witnesses


def _amo_choices(st: EventStructure) -> list[dict[int, tuple[str, str]]]:
    amos = [e for e in st.events if e.kind == "AMO" and e.amo_pointers]
    if not amos:
        return [{}]
    per_event = []
    for e in amos:
        opts = [
            (kind, loc) for (reg, loc) in e.amo_pointers for kind in ("R", "W")
        ]
        per_event.append([(e.eid, opt) for opt in opts])
    return [dict(combo) for combo in itertools.product(*per_event)]


def canonical_arch(
    cand_st: EventStructure, amo: dict[int, tuple[str, str]]
) -> tuple[dict[int, int], dict[str, list[int]]]:
    """The unique single-thread TSO witness: last-writer rf, po-ordered co."""
    rf: dict[int, int] = {}
    co: dict[str, list[int]] = {}
    last: dict[str, int] = {}

    def kind_loc(eid: int) -> tuple[str | None, str | None]:
        e = cand_st.events[eid]
        if e.kind == "AMO":
            return amo.get(eid, (None, None))
        return (e.kind if e.kind in ("R", "W") else None), e.location

    for order in cand_st.po:
        for eid in order:
            kind, loc = kind_loc(eid)
            if kind == "R":
                rf[eid] = last.get(loc, 0)
            elif kind == "W":
                co.setdefault(loc, [0]).append(eid)
                last[loc] = eid
    return rf, co


def _tso_consistent(cand: Candidate) -> bool:
    st = cand.st
    mem = cand.committed_memory()
    po_pos: dict[int, tuple[int, int]] = {}
    for tid, order in enumerate(st.po):
        for i, e in enumerate(order):
            po_pos[e] = (tid, i)
    rf = cand.rf_pairs()
    co = cand.co_pairs()
    fr = cand.fr()

    def acyclic(edges) -> bool:
        g = nx.DiGraph()
        g.add_nodes_from(mem + [0])
        g.add_edges_from(edges)
        return nx.is_directed_acyclic_graph(g)

    # Per-location sequential consistency.
    po_loc = set()
    for tid, order in enumerate(st.po):
        m = [e for e in order if cand.access_kind(e) is not None]
        for i, e1 in enumerate(m):
            for e2 in m[i + 1 :]:
                if cand.location_of(e1) == cand.location_of(e2):
                    po_loc.add((e1, e2))
    if not acyclic(rf | co | fr | po_loc):
        return False

    # Causality with the store-to-load relaxation.
    ppo = set()
    for tid, order in enumerate(st.po):
        m = [e for e in order if cand.access_kind(e) is not None]
        for i, e1 in enumerate(m):
            for e2 in m[i + 1 :]:
                if cand.access_kind(e1) == "W" and cand.access_kind(e2) == "R":
                    continue
                ppo.add((e1, e2))
    rfe = {
        (w, r)
        for (w, r) in rf
        if w == 0 or st.events[w].thread != st.events[r].thread
    }
    return acyclic(rfe | co | fr | ppo | set(st.fence_pairs))


def arch_witnesses(
    st: EventStructure, amo: dict[int, tuple[str, str]], tick=None
) -> list[tuple[dict[int, int], dict[str, list[int]]]]:
    """All TSO-consistent (rf, co) pairs; brute force for multi-thread."""
    if len(st.po) == 1:
        return [canonical_arch(st, amo)]

    def kind_loc(eid: int) -> tuple[str | None, str | None]:
        e = st.events[eid]
        if e.kind == "AMO":
            return amo.get(eid, (None, None))
        return (e.kind if e.kind in ("R", "W") else None), e.location

    reads: list[int] = []
    writes: dict[str, list[int]] = {}
    for order in st.po:
        for eid in order:
            kind, loc = kind_loc(eid)
            if kind == "R":
                reads.append(eid)
            elif kind == "W":
                writes.setdefault(loc, []).append(eid)
    if len(reads) + sum(len(ws) for ws in writes.values()) > 10:
        raise ExecutionError(
            "multi-thread witness enumeration is limited to 10 memory events"
        )
    rf_opts = []
    for r in reads:
        _, loc = kind_loc(r)
        rf_opts.append([(r, w) for w in [0] + writes.get(loc, [])])
    co_opts = [
        [(loc, [0] + list(p)) for p in itertools.permutations(ws)]
        for loc, ws in writes.items()
    ]
    out = []
    for rf_combo in itertools.product(*rf_opts) if rf_opts else [()]:
        for co_combo in itertools.product(*co_opts) if co_opts else [()]:
            if tick is not None:
                tick()
            rf = dict(rf_combo)
            co = dict(co_combo)
            probe = Candidate(
                st=st, rf=rf, co=co, rfx_in={}, rfx_xstate={}, cox={},
                xmode={}, bottom_sources={}, amo=dict(amo),
            )
            if _tso_consistent(probe):
                out.append((rf, co))
    return out


# --------------------------------------------------------------------------
# microarchitectural witness (canonical cache simulation)


def _build_comx(
    st: EventStructure,
    amo: dict[int, tuple[str, str]],
    silent: frozenset[int],
    site: Site | None,
    stale_src: int | None,
) -> tuple[dict[int, int], dict[int, int | str], dict[str, list[int]], dict[int, str], dict[str, int]]:
    rfx_in: dict[int, int] = {}
    rfx_xstate: dict[int, int | str] = {}
    writers: dict[str, list[int]] = {}
    xmode: dict[int, str] = {}

    def line(x: str) -> list[int]:
        return writers.setdefault(x, [0])

    for order in st.tfo:
        for eid in order:
            e = st.events[eid]
            if e.kind == "AMO":
                if eid not in amo:
                    continue
                kind, x = amo[eid]
            elif e.kind in ("R", "W"):
                kind, x = e.kind, e.location
            else:
                continue
            if site is not None and eid == site.read:
                # The misforwarded load: an stl site forwards from a stale
                # same-line writer (or runs against the untouched line), a
                # psf site fills from an aliased store's line.
                assert stale_src is not None
                if site.kind == "psf":
                    src_line = st.events[stale_src].location
                    assert src_line is not None
                    rfx_in[eid] = stale_src
                    rfx_xstate[eid] = src_line
                    xmode[eid] = "R"
                elif stale_src == 0:
                    rfx_in[eid] = 0
                    rfx_xstate[eid] = x
                    xmode[eid] = "RW"
                    line(x).append(eid)
                else:
                    rfx_in[eid] = stale_src
                    rfx_xstate[eid] = x
                    xmode[eid] = "R"
                continue
            if eid in silent:
                xmode[eid] = "R"  # elided write: no fill edge, no line claim
                continue
            hist = line(x)
            if kind == "W":
                rfx_in[eid] = hist[-1]
                rfx_xstate[eid] = x
                xmode[eid] = "RW"
                hist.append(eid)
            else:
                if len(hist) > 1:
                    rfx_in[eid] = hist[-1]
                    xmode[eid] = "R"
                else:
                    rfx_in[eid] = 0
                    xmode[eid] = "RW"
                    hist.append(eid)
                rfx_xstate[eid] = x
    bottom_sources = {
        x: hist[-1] for x, hist in writers.items() if len(hist) > 1
    }
    return rfx_in, rfx_xstate, writers, xmode, bottom_sources


def confidential(cand: Candidate) -> bool:
    """The microarchitectural analog of consistency.

    The fill/writer orders must compose acyclically with same-line fetch
    order, and any fill edge pointing *against* fetch order (reading a line
    version that a fetch-earlier event should already have replaced) is
    only justified at a bypass site.
    """
    pos = cand.tfo_positions()
    pos[cand.st.bottom] = len(pos) + 1
    g = nx.DiGraph()
    g.add_node(0)
    for e, src in cand.rfx_in.items():
        g.add_edge(src, e)
    for x, order in cand.cox.items():
        for w1, w2 in zip(order, order[1:]):
            g.add_edge(w1, w2)
    by_x: dict[str, list[int]] = {}
    for e, src in cand.rfx_in.items():
        by_x.setdefault(str(cand.rfx_xstate[e]), []).append(e)
    for x, order in cand.cox.items():
        members = sorted(
            set(order[1:]) | set(by_x.get(x, [])), key=lambda e: pos.get(e, -1)
        )
        for e1, e2 in zip(members, members[1:]):
            g.add_edge(e1, e2)
    if not nx.is_directed_acyclic_graph(g):
        return False
    site_read = cand.site.read if cand.site is not None else None
    for e, w2 in cand.frx():
        if w2 == 0 or e == cand.st.bottom:
            continue
        if pos.get(w2, 0) < pos.get(e, 0) and e != site_read:
            return False
    return True


# --------------------------------------------------------------------------
# candidate enumeration


def _bypass_variants(
    st: EventStructure, d_spec: int, seen: set
) -> list[tuple[EventStructure, Site, int]]:
    out = []
    for site in st.sites:
        derived = ev_mod.derive_bypass(st, site, d_spec)
        if derived is None:
            continue
        key = (
            tuple(step.node for step in derived.plans[0]),
            site.kind,
            st.events[site.read].node_id,
        )
        if key in seen:
            continue
        seen.add(key)
        sources = ev_mod.remap_sources(st, derived, site)
        new_site = Site(
            read=derived.bypass_site, kind=site.kind, sources=sources, last_store=-1
        )
        for src in sources:
            out.append((derived, new_site, src))
    return out


def _nonempty_subsets(items: list[int]) -> list[frozenset[int]]:
    out = []
    for n in range(1, len(items) + 1):
        for combo in itertools.combinations(items, n):
            out.append(frozenset(combo))
    return out


def _make_candidates(
    st: EventStructure,
    amo: dict[int, tuple[str, str]],
    silent: frozenset[int],
    site: Site | None,
    stale_src: int | None,
    tick,
) -> list[Candidate]:
    out = []
    for rf, co in arch_witnesses(st, amo, tick):
        rfx_in, rfx_x, writers, xmode, bottom = _build_comx(
            st, amo, silent, site, stale_src
        )
        cand = Candidate(
            st=st,
            rf=rf,
            co=co,
            rfx_in=rfx_in,
            rfx_xstate=rfx_x,
            cox=writers,
            xmode=xmode,
            bottom_sources=bottom,
            silent=silent,
            site=site,
            stale_src=stale_src,
            amo=dict(amo),
        )
        if confidential(cand):
            out.append(cand)
    return out


def enumerate_candidates(
    structures: list[EventStructure],
    silent_stores: bool = False,
    d_spec: int = 250,
    tick=None,
) -> list[Candidate]:
    """All consistent candidates: canonical, silent-store, and bypass ones."""
    out: list[Candidate] = []
    seen_bypass: set = set()
    for st in structures:
        if tick is not None:
            tick()
        variants: list[tuple[EventStructure, Site | None, int | None]] = [
            (st, None, None)
        ]
        if len(st.po) == 1:
            variants += _bypass_variants(st, d_spec, seen_bypass)
        for cst, site, src in variants:
            for amo in _amo_choices(cst):
                out.extend(_make_candidates(cst, amo, frozenset(), site, src, tick))
                if silent_stores and site is None:
                    eligible = [
                        e.eid for e in cst.events if e.silent_eligible
                    ]
                    for subset in _nonempty_subsets(eligible):
                        out.extend(
                            _make_candidates(cst, amo, subset, None, None, tick)
                        )
    return out
