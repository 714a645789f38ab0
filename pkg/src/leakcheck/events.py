"""Event structures: control-flow paths decorated with speculative fetches.

An event structure fixes one committed path through the abstract CFG (one
outcome per branch), an optional set of transient events fetched beyond it,
and the static dependency edges between events:

* ``po``  -- committed program order, per thread;
* ``tfo`` -- total fetch order, per thread (``po`` plus transient events);
* ``addr``/``data``/``ctrl`` -- syntactic dependencies derived from a
  register-taint walk (which earlier loads an address, a stored value, or a
  branch condition was computed from);
* fence-induced ordering pairs between committed memory events.

Three speculation primitives can extend a structure:

* ``branch``  -- at every committed two-way branch, the untaken arm is
  fetched transiently up to the speculation depth (stopping before any
  further branch or fence);
* ``stl``     -- a committed load with a po-earlier fence-free store to the
  same location is marked as a *site*: a derived structure re-runs the load
  transiently against a stale forwarding source;
* ``psf``     -- as ``stl`` but the qualifying store may target any
  location (the load's address is mispredicted to alias it).

Sites are recorded on the path structure; :func:`derive_bypass` builds the
derived structure for one site.  Events ``0`` and ``len(events)-1`` are the
initial-state writer and the final observer; a transient squash pseudo-event
marks speculative fetch running off the end of the program.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx

from . import cfg as acfg_mod
from . import ir
from .cfg import ACfg, ANode, EXIT


class AnalysisTimeout(Exception):
    """Raised when a cooperative deadline expires mid-enumeration."""


@dataclass(frozen=True)
class Site:
    """A committed load that a bypass primitive may misforward.

    ``sources`` are the stale forwarding choices: event ids of writers that
    precede the load's canonical source in the canonical cache order (the
    initial-state writer ``0`` included) for ``stl``, or fence-free
    different-location stores for ``psf``.  ``last_store`` is the nearest
    qualifying store, used by repair to disable the site.
    """

    read: int
    kind: str  # "stl" | "psf"
    sources: tuple[int, ...]
    last_store: int


@dataclass(frozen=True)
class Step:
    """One fetch in a structure plan: an ACfg node, or a squash marker."""

    node: int | None  # None = transient squash (ran off the program's end)
    committed: bool
    window: int | None = None  # plan index of the branch that opened this fetch


@dataclass
class Event:
    eid: int
    kind: str  # "R" | "W" | "BR" | "F" | "AMO" | "TOP" | "BOT" | "SBOT"
    thread: int = 0
    transient: bool = False
    node: ANode | None = None
    node_id: int | None = None
    location: str | None = None
    gep: bool = False  # address is register-indexed (a computed element access)
    fence: str | None = None  # "full" | "lfence" for F events
    window: int | None = None  # eid of the branch this transient fetch belongs to
    cond_reads: frozenset[int] = frozenset()  # BR: loads tainting the condition
    value_reads: frozenset[int] = frozenset()  # W/AMO: loads tainting the value
    addr_reads: frozenset[int] = frozenset()  # R/W/AMO: loads tainting the address
    amo_pointers: tuple[tuple[str, str], ...] = ()  # AMO: (register, location) choices
    silent_eligible: bool = False
    silent_definite: bool = False
    label: str = ""

    def is_memory(self) -> bool:
        return self.kind in ("R", "W", "AMO")

    def display(self) -> str:
        return f"{self.label}_S" if self.transient else self.label


@dataclass
class EventStructure:
    events: list[Event]
    po: list[list[int]]  # committed program events per thread
    tfo: list[list[int]]  # fetched program events per thread (includes squashes)
    top: int
    bottom: int
    addr: frozenset[tuple[int, int]]
    addr_gep: frozenset[tuple[int, int]]
    data: frozenset[tuple[int, int]]
    ctrl: frozenset[tuple[int, int]]
    fence_pairs: frozenset[tuple[int, int]]
    sites: tuple[Site, ...]
    merged_aliases: frozenset[frozenset[str]]
    bypass_site: int | None = None  # derived structures: the misforwarded load
    plans: list[list[Step]] = field(default_factory=list, repr=False)
    acfg: ACfg | None = field(default=None, repr=False)
    step_of: dict[int, tuple[int, int]] = field(default_factory=dict, repr=False)

    def event(self, eid: int) -> Event:
        return self.events[eid]

    def locations(self) -> set[str]:
        return {e.location for e in self.events if e.location is not None}

    def transient_events(self) -> list[int]:
        return [e.eid for e in self.events if e.transient]

    def describe(self) -> str:
        parts = []
        for tid, order in enumerate(self.tfo):
            names = " ".join(self.events[e].display() for e in order)
            parts.append(names if len(self.tfo) == 1 else f"t{tid}: {names}")
        return " | ".join(parts)


def _uf_find(uf: dict[str, str], name: str) -> str:
    root = name
    while uf.get(root, root) != root:
        root = uf[root]
    while uf.get(name, name) != name:
        uf[name], name = root, uf[name]
    return root


def _make_union_find(pairs: frozenset[frozenset[str]]) -> dict[str, str]:
    uf: dict[str, str] = {}
    for pair in pairs:
        roots = sorted(_uf_find(uf, n) for n in pair)
        for other in roots[1:]:
            uf[other] = roots[0]
    return uf


def _alias_subsets(aliases: list[tuple[str, str]]) -> list[frozenset[frozenset[str]]]:
    subsets: list[frozenset[frozenset[str]]] = [frozenset()]
    for pair in aliases:
        merged = frozenset(pair)
        subsets = subsets + [chosen | {merged} for chosen in subsets]
    return subsets


def committed_paths(graph: ACfg, root: int) -> list[list[int]]:
    """All committed paths from ``root`` to the exit (one per branch outcome)."""
    paths: list[list[int]] = []
    stack: list[tuple[int, list[int]]] = [(root, [])]
    while stack:
        node, prefix = stack.pop()
        if node == EXIT:
            paths.append(prefix)
            continue
        succs = graph.succ[node]
        for nxt in reversed(succs):
            stack.append((nxt, prefix + [node]))
    paths.reverse()
    return paths


def _window_steps(
    graph: ACfg, branch_idx: int, start: int, d_spec: int
) -> list[Step]:
    """Transiently fetch the untaken arm: straight-line, no nesting."""
    steps: list[Step] = []
    cur = start
    depth = 0
    while True:
        if cur == EXIT:
            steps.append(Step(None, False, branch_idx))
            break
        op = graph.nodes[cur].instr.op
        if isinstance(op, ir.BranchEqZero):
            break
        if isinstance(op, (ir.Fence, ir.Protect)):
            break
        if depth >= d_spec:
            break
        steps.append(Step(cur, False, branch_idx))
        depth += 1
        succs = graph.succ[cur]
        cur = succs[0] if succs else EXIT
    return steps


def _plan_for_path(
    graph: ACfg, path: list[int], primitives: frozenset[str], d_spec: int
) -> list[Step]:
    plan: list[Step] = []
    for pos, node in enumerate(path):
        idx = len(plan)
        plan.append(Step(node, True))
        op = graph.nodes[node].instr.op
        succs = graph.succ[node]
        if (
            "branch" in primitives
            and isinstance(op, ir.BranchEqZero)
            and len(succs) == 2
        ):
            taken = path[pos + 1] if pos + 1 < len(path) else EXIT
            others = [s for s in succs if s != taken]
            if others:
                plan.extend(_window_steps(graph, idx, others[0], d_spec))
    return plan


def _node_label(node: ANode) -> str:
    # Labels already carry the inline-instance suffix from splicing;
    # anonymous nodes need it added to stay unique across instances.
    base = node.instr.label or f"{node.func}@{node.index}{node.site}"
    if node.copy and any(c != 1 for c in node.copy):
        base += "~" + ".".join(str(c) for c in node.copy)
    return base


class _ThreadState:
    """Register taint and definition slots while walking one thread's plan."""

    def __init__(self) -> None:
        self.taint: dict[str, frozenset[int]] = {}
        self.defslot: dict[str, int] = {}

    def snapshot(self) -> tuple[dict, dict]:
        return dict(self.taint), dict(self.defslot)

    def restore(self, snap: tuple[dict, dict]) -> None:
        self.taint, self.defslot = dict(snap[0]), dict(snap[1])

    def reads_of(self, regs) -> frozenset[int]:
        out: frozenset[int] = frozenset()
        for reg in regs:
            out |= self.taint.get(reg, frozenset())
        return out


def _branch_regions(graph: ACfg) -> dict[int, frozenset[int]]:
    """Nodes control-dependent on each two-way branch (postdominator-bounded)."""
    g = nx.DiGraph()
    g.add_node(EXIT)
    for node, succs in enumerate(graph.succ):
        for nxt in succs:
            g.add_edge(nxt, node)  # reversed: postdominators = dominators here
        if not succs:
            g.add_edge(EXIT, node)
    regions: dict[int, frozenset[int]] = {}
    reachable = set(g.nodes)
    ipdom = nx.immediate_dominators(g, EXIT)
    for node, succs in enumerate(graph.succ):
        if not isinstance(graph.nodes[node].instr.op, ir.BranchEqZero):
            continue
        if len(succs) != 2:
            regions[node] = frozenset()
            continue
        stop = ipdom.get(node, EXIT)
        seen: set[int] = set()
        stack = [s for s in succs if s != stop]
        while stack:
            cur = stack.pop()
            if cur in seen or cur == stop or cur == EXIT:
                continue
            seen.add(cur)
            stack.extend(s for s in graph.succ[cur] if s != stop)
        regions[node] = frozenset(seen)
    return regions


class _Builder:
    def __init__(
        self,
        graph: ACfg,
        merged: frozenset[frozenset[str]],
        primitives: frozenset[str],
    ) -> None:
        self.graph = graph
        self.merged = merged
        self.uf = _make_union_find(merged)
        self.primitives = primitives
        self.events: list[Event] = [Event(0, "TOP", label="⊤")]
        self.po: list[list[int]] = []
        self.tfo: list[list[int]] = []
        self.addr: set[tuple[int, int]] = set()
        self.addr_gep: set[tuple[int, int]] = set()
        self.data: set[tuple[int, int]] = set()
        self.ctrl: set[tuple[int, int]] = set()
        self.fence_pairs: set[tuple[int, int]] = set()
        self.step_of: dict[int, tuple[int, int]] = {}
        self._eid_by_step: dict[tuple[int, int], int] = {}
        self._plans_cache: list[list[Step]] = []

    def location(self, addr: ir.Address, state: _ThreadState) -> tuple[str, bool]:
        if isinstance(addr, ir.Direct):
            return _uf_find(self.uf, addr.loc), False
        if isinstance(addr, ir.Indexed):
            if isinstance(addr.index, int):
                return _uf_find(self.uf, f"{addr.base}.{addr.index}"), False
            return _uf_find(self.uf, addr.base), True
        # Indirect: identity keyed by the reaching definition of the pointer.
        return f"*{addr.reg}@{state.defslot.get(addr.reg, -1)}", False

    def walk_thread(self, thread: int, plan: list[Step]) -> None:
        state = _ThreadState()
        graph = self.graph
        if graph.program.multithread:
            params: list[str] = []
        else:
            params = graph.program.entry_function.params
        for reg in params:
            state.taint[reg] = frozenset()
            state.defslot[reg] = -1
        po: list[int] = []
        tfo: list[int] = []
        saved: tuple[dict, dict] | None = None
        in_window: int | None = None
        for step_idx, step in enumerate(plan):
            if step.window is not None and step.window != in_window:
                if in_window is None:
                    saved = state.snapshot()
                else:
                    assert saved is not None
                    state.restore(saved)
                    saved = state.snapshot()
                in_window = step.window
            elif step.window is None and in_window is not None:
                assert saved is not None
                state.restore(saved)
                saved = None
                in_window = None
            self._emit(thread, step_idx, step, plan, state, po, tfo)
        self.po.append(po)
        self.tfo.append(tfo)

    def _fresh(self, **kw) -> Event:
        ev = Event(eid=len(self.events), **kw)
        self.events.append(ev)
        return ev

    def _emit(
        self,
        thread: int,
        step_idx: int,
        step: Step,
        plan: list[Step],
        state: _ThreadState,
        po: list[int],
        tfo: list[int],
    ) -> None:
        window_eid = None
        if step.window is not None:
            window_eid = self._eid_by_step.get((thread, step.window))
        if step.node is None:
            ev = self._fresh(
                kind="SBOT",
                thread=thread,
                transient=True,
                window=window_eid,
                label="⊥",
            )
            tfo.append(ev.eid)
            return
        node = self.graph.nodes[step.node]
        op = node.instr.op
        label = _node_label(node)
        ev: Event | None = None
        if isinstance(op, ir.Load):
            loc, gep = self.location(op.addr, state)
            addr_reads = state.reads_of(ir.address_regs(op.addr))
            ev = self._fresh(
                kind="R",
                thread=thread,
                transient=not step.committed,
                node=node,
                node_id=step.node,
                location=loc,
                gep=gep,
                window=window_eid,
                addr_reads=addr_reads,
                label=label,
            )
            for src in addr_reads:
                self.addr.add((src, ev.eid))
                if gep:
                    self.addr_gep.add((src, ev.eid))
            state.taint[op.dest] = frozenset({ev.eid})
            state.defslot[op.dest] = step_idx
        elif isinstance(op, ir.Store):
            loc, gep = self.location(op.addr, state)
            addr_reads = state.reads_of(ir.address_regs(op.addr))
            value_reads = state.reads_of(op.value.regs)
            ev = self._fresh(
                kind="W",
                thread=thread,
                transient=not step.committed,
                node=node,
                node_id=step.node,
                location=loc,
                gep=gep,
                window=window_eid,
                addr_reads=addr_reads,
                value_reads=value_reads,
                label=label,
            )
            for src in addr_reads:
                self.addr.add((src, ev.eid))
                if gep:
                    self.addr_gep.add((src, ev.eid))
            for src in value_reads:
                self.data.add((src, ev.eid))
        elif isinstance(op, ir.Alu):
            state.taint[op.dest] = state.reads_of(op.expr.regs)
            state.defslot[op.dest] = step_idx
        elif isinstance(op, ir.BranchEqZero):
            ev = self._fresh(
                kind="BR",
                thread=thread,
                transient=not step.committed,
                node=node,
                node_id=step.node,
                window=window_eid,
                cond_reads=state.reads_of([op.cond]),
                label=label,
            )
        elif isinstance(op, ir.Fence):
            ev = self._fresh(
                kind="F",
                thread=thread,
                transient=not step.committed,
                node=node,
                node_id=step.node,
                fence=op.kind,
                window=window_eid,
                label=label,
            )
        elif isinstance(op, ir.Protect):
            ev = self._fresh(
                kind="F",
                thread=thread,
                transient=not step.committed,
                node=node,
                node_id=step.node,
                fence="lfence",
                window=window_eid,
                label=label,
            )
        elif isinstance(op, acfg_mod.AbstractMemOp):
            pointers = []
            addr_reads: frozenset[int] = frozenset()
            for reg in op.pointer_args:
                pointers.append((reg, f"*{reg}@{state.defslot.get(reg, -1)}"))
                addr_reads |= state.taint.get(reg, frozenset())
            ev = self._fresh(
                kind="AMO",
                thread=thread,
                transient=not step.committed,
                node=node,
                node_id=step.node,
                window=window_eid,
                addr_reads=addr_reads,
                amo_pointers=tuple(pointers),
                label=label,
            )
            for src in addr_reads:
                self.addr.add((src, ev.eid))
        # Skip and Jump fetch but produce no event.
        if ev is not None:
            self.step_of[ev.eid] = (thread, step_idx)
            self._eid_by_step[(thread, step_idx)] = ev.eid
            tfo.append(ev.eid)
            if step.committed:
                po.append(ev.eid)

    def finish(
        self,
        plans: list[list[Step]],
        regions: dict[int, frozenset[int]] | None,
        bypass_site: int | None = None,
        want_sites: bool = True,
    ) -> EventStructure:
        bottom = self._fresh(kind="BOT", label="⊥")
        self._fence_order()
        if regions is not None:
            self._control_deps(regions)
        self._silent_marks()
        sites: tuple[Site, ...] = ()
        if want_sites and len(plans) == 1 and bypass_site is None:
            sites = tuple(self._find_sites())
        return EventStructure(
            events=self.events,
            po=self.po,
            tfo=self.tfo,
            top=0,
            bottom=bottom.eid,
            addr=frozenset(self.addr),
            addr_gep=frozenset(self.addr_gep),
            data=frozenset(self.data),
            ctrl=frozenset(self.ctrl),
            fence_pairs=frozenset(self.fence_pairs),
            sites=sites,
            merged_aliases=self.merged,
            bypass_site=bypass_site,
            plans=plans,
            acfg=self.graph,
            step_of=dict(self.step_of),
        )

    def _fence_order(self) -> None:
        for order in self.po:
            for i, fid in enumerate(order):
                fev = self.events[fid]
                if fev.kind != "F":
                    continue
                before = [e for e in order[:i] if self.events[e].is_memory()]
                after = [e for e in order[i + 1 :] if self.events[e].is_memory()]
                for e1 in before:
                    if fev.fence == "lfence" and self.events[e1].kind != "R":
                        continue
                    for e2 in after:
                        self.fence_pairs.add((e1, e2))

    def _control_deps(self, regions: dict[int, frozenset[int]]) -> None:
        branches = [e for e in self.events if e.kind == "BR" and not e.transient]
        for br in branches:
            if not br.cond_reads:
                continue
            assert br.node_id is not None
            region = regions.get(br.node_id, frozenset())
            for order in self.tfo:
                if br.eid not in order:
                    continue
                pos = order.index(br.eid)
                for eid in order[pos + 1 :]:
                    ev = self.events[eid]
                    if ev.node_id is not None and ev.node_id in region:
                        for src in br.cond_reads:
                            self.ctrl.add((src, eid))
            for ev in self.events:
                if ev.transient and ev.window == br.eid:
                    for src in br.cond_reads:
                        self.ctrl.add((src, ev.eid))

    def _silent_marks(self) -> None:
        if len(self.po) != 1:
            return
        seen: dict[str, list[Event]] = {}
        for eid in self.po[0]:
            ev = self.events[eid]
            if ev.kind != "W":
                continue
            prior = seen.setdefault(ev.location or "", [])
            if prior:
                ev.silent_eligible = True
                ev.silent_definite = any(
                    self._store_identity(p) == self._store_identity(ev) for p in prior
                )
            prior.append(ev)

    def _store_identity(self, ev: Event) -> tuple:
        assert ev.node is not None and isinstance(ev.node.instr.op, ir.Store)
        op = ev.node.instr.op
        thread, step_idx = self.step_of[ev.eid]
        # Value identity: same expression text and same reaching definition for
        # every register it mentions, judged at the store's own program point.
        slots = self._reg_slots_at(thread, step_idx, op.value.regs)
        return (op.value.text, slots)

    def _reg_slots_at(
        self, thread: int, step_idx: int, regs: frozenset[str]
    ) -> tuple:
        state = _ThreadState()
        plan = self._plans_cache[thread]
        for sidx in range(step_idx):
            step = plan[sidx]
            if step.node is None or not step.committed:
                continue
            op = self.graph.nodes[step.node].instr.op
            if isinstance(op, ir.Load):
                state.defslot[op.dest] = sidx
            elif isinstance(op, ir.Alu):
                state.defslot[op.dest] = sidx
        return tuple(sorted((r, state.defslot.get(r, -1)) for r in regs))

    def _find_sites(self) -> list[Site]:
        want_stl = "stl" in self.primitives
        want_psf = "psf" in self.primitives
        if not (want_stl or want_psf):
            return []
        order = self.tfo[0]
        committed = self.po[0]
        sites: list[Site] = []
        # Canonical cache simulation over fetch order: per-location writer
        # history (read misses fill and count as writers).
        history: dict[str, list[int]] = {}
        committed_stores: list[int] = []
        for eid in order:
            ev = self.events[eid]
            if ev.kind == "AMO" or not ev.is_memory():
                continue
            loc = ev.location or ""
            hist = history.setdefault(loc, [0])
            if ev.kind == "R" and not ev.transient:
                if want_stl and len(hist) > 1:
                    canonical = hist[-1]
                    if self._qualifies(canonical, eid, committed, require_store=True):
                        sites.append(
                            Site(eid, "stl", tuple(hist[:-1]), canonical)
                        )
                if want_psf:
                    others = [
                        s
                        for s in committed_stores
                        if self.events[s].location != loc
                        and self._qualifies(s, eid, committed)
                    ]
                    if others:
                        sites.append(Site(eid, "psf", tuple(others), others[-1]))
            if ev.kind == "W":
                hist.append(eid)
                if not ev.transient:
                    committed_stores.append(eid)
            elif ev.kind == "R" and len(hist) == 1 and hist[0] == 0:
                # First touch: the miss fills the line and becomes its writer.
                hist.append(eid)
        return sites

    def _qualifies(
        self, store: int, read: int, committed: list[int], require_store: bool = False
    ) -> bool:
        if store == 0 or self.events[store].transient:
            return False
        if require_store and self.events[store].kind != "W":
            return False
        if store not in committed or read not in committed:
            return False
        lo, hi = committed.index(store), committed.index(read)
        if lo >= hi:
            return False
        return not any(
            self.events[e].kind == "F" for e in committed[lo + 1 : hi]
        )


def _build(
    graph: ACfg,
    merged: frozenset[frozenset[str]],
    plans: list[list[Step]],
    primitives: frozenset[str],
    regions: dict[int, frozenset[int]] | None,
    bypass_site: int | None = None,
    want_sites: bool = True,
) -> EventStructure:
    builder = _Builder(graph, merged, primitives)
    builder._plans_cache = plans
    for thread, plan in enumerate(plans):
        builder.walk_thread(thread, plan)
    return builder.finish(plans, regions, bypass_site, want_sites)


def enumerate_event_structures(
    graph: ACfg,
    primitives: frozenset[str] = frozenset(),
    d_spec: int = 250,
    tick=None,
) -> list[EventStructure]:
    """All event structures of the program: alias resolutions x path choices.

    ``tick`` is an optional callable invoked once per structure; it may raise
    :class:`AnalysisTimeout` to abandon a long-running enumeration.
    """
    regions = _branch_regions(graph)
    subsets = _alias_subsets(graph.program.aliases)
    per_root: list[list[list[Step]]] = []
    for root in graph.roots:
        plans = [
            _plan_for_path(graph, path, primitives, d_spec)
            for path in committed_paths(graph, root)
        ]
        per_root.append(plans)
    combos: list[list[list[Step]]] = [[]]
    for plans in per_root:
        combos = [chosen + [plan] for chosen in combos for plan in plans]
    structures = []
    for merged in subsets:
        for plan_combo in combos:
            if tick is not None:
                tick()
            structures.append(
                _build(graph, merged, plan_combo, primitives, regions)
            )
    return structures


def derive_bypass(
    st: EventStructure, site: Site, d_spec: int = 250
) -> EventStructure | None:
    """The derived structure where ``site``'s load re-runs transiently.

    The committed prefix before the load is kept; the load and the committed
    continuation after it become a transient suffix, truncated at the first
    fence or branch or at the speculation depth (with a squash marker if the
    program's end is reached first).  None when the depth budget leaves no
    room for the re-run at all.
    """
    assert st.acfg is not None and len(st.plans) == 1
    plan = st.plans[0]
    thread, site_step = st.step_of[site.read]
    prefix = [s for s in plan[:site_step] if s.committed]
    suffix: list[Step] = []
    depth = 0
    exited = True
    for step in plan[site_step:]:
        if not step.committed:
            continue
        assert step.node is not None
        op = st.acfg.nodes[step.node].instr.op
        if isinstance(op, (ir.BranchEqZero, ir.Fence, ir.Protect)):
            exited = False
            break
        if depth >= d_spec:
            exited = False
            break
        suffix.append(Step(step.node, False))
        depth += 1
    if exited:
        suffix.append(Step(None, False))
    if not any(step.node is not None for step in suffix):
        return None
    new_plan = prefix + suffix
    derived = _build(
        st.acfg,
        st.merged_aliases,
        [new_plan],
        frozenset(),
        _branch_regions(st.acfg),
        bypass_site=-1,
        want_sites=False,
    )
    # The site load is the first transient event of the derived structure.
    site_eid = next(e.eid for e in derived.events if e.transient)
    derived.bypass_site = site_eid
    return derived


def remap_sources(
    st: EventStructure, derived: EventStructure, site: Site
) -> tuple[int, ...]:
    """Map a site's stale-source event ids into the derived structure.

    The derived plan keeps the committed prefix steps in order, so an old
    committed step index maps to its position among committed predecessors.
    """
    plan = st.plans[0]
    thread, site_step = st.step_of[site.read]
    old_to_new: dict[int, int] = {}
    new_idx = 0
    for old_idx in range(site_step):
        if plan[old_idx].committed:
            old_to_new[old_idx] = new_idx
            new_idx += 1
    new_by_step = {step: eid for eid, step in derived.step_of.items()}
    out = []
    for src in site.sources:
        if src == 0:
            out.append(0)
            continue
        _, old_idx = st.step_of[src]
        mapped = new_by_step.get((0, old_to_new.get(old_idx, -1)))
        if mapped is not None:
            out.append(mapped)
    return tuple(out)
