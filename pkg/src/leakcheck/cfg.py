"""Abstract control-flow graphs: loops summarized, calls inlined, acyclic.

The transforms work on an explicit digraph over instruction nodes rather
than on a relabeled instruction list, so unrolling never has to invent
jump instructions: a node is (instruction, provenance) and control flow
lives in the successor lists.

Loop summarization replaces each natural loop by two unrolled copies.
Exit tests appear in both copies; the second copy's back edges are
deleted (a path that would iterate a third time simply ends there).
Irreducible control flow is rejected.  Calls are inlined with renamed
registers and labels; recursion is expanded twice and then abstracted
like an extern call; an extern call becomes a single abstract memory
operation over its pointer operands.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import networkx as nx

from . import ir

EXIT = -1


class CfgError(Exception):
    """Irreducible control flow or malformed call structure."""


@dataclass(frozen=True)
class AbstractMemOp:
    """Summary of an unknown callee over its pointer operands.

    Stands for one memory access that may be a load or a store through
    any one of the pointer operands; the concrete choice is enumerated
    per candidate execution.
    """

    func: str
    pointer_args: tuple[str, ...]

    def __str__(self):
        return f"abstract {self.func}({', '.join(self.pointer_args)})"


@dataclass
class ANode:
    """One acfg node: a (possibly transformed) instruction plus provenance.

    ``copy`` is the unroll-copy path: () outside any loop, (1,) / (2,)
    inside a summarized loop, one component per nesting level.  ``site``
    distinguishes inline instances of the same callee (the suffix also
    used for label renaming).  The provenance triple
    (func + site, index, copy) is total and injective over the graph.
    """

    instr: ir.Instr
    func: str
    index: int
    copy: tuple[int, ...] = ()
    site: str = ""

    @property
    def provenance(self) -> tuple[str, int, tuple[int, ...]]:
        return (self.func + self.site, self.index, self.copy)

    def describe(self) -> str:
        c = ".".join(map(str, self.copy)) if self.copy else "1"
        return f"{self.func}{self.site}[{self.index}]#{c}"


@dataclass
class ACfg:
    nodes: list[ANode]
    succ: list[list[int]]  # EXIT marks function/thread exit
    roots: list[int]
    program: ir.Program


# --------------------------------------------------------------------------
# inlining


def _rename_op(op: ir.Op, m: dict[str, str]) -> ir.Op:
    if not m:
        return op

    def rr(r: str) -> str:
        return m.get(r, r)

    def re_(e: ir.Expr) -> ir.Expr:
        if not e.regs:
            return e
        return ir.make_expr(ir.REG_RE.sub(lambda g: rr(g.group(0)), e.text))

    def ra(a: ir.AddressExpr) -> ir.AddressExpr:
        if isinstance(a, ir.Indexed) and isinstance(a.index, str):
            return replace(a, index=rr(a.index))
        if isinstance(a, ir.Indirect):
            return replace(a, reg=rr(a.reg))
        return a

    if isinstance(op, ir.Load):
        return ir.Load(ra(op.addr), rr(op.dest))
    if isinstance(op, ir.Store):
        return ir.Store(ra(op.addr), re_(op.value))
    if isinstance(op, ir.Alu):
        return ir.Alu(rr(op.dest), re_(op.expr))
    if isinstance(op, ir.BranchEqZero):
        return replace(op, cond=rr(op.cond))
    if isinstance(op, ir.Protect) and op.reg:
        return replace(op, reg=rr(op.reg))
    if isinstance(op, ir.Call):
        return replace(op, args=tuple(rr(a) for a in op.args))
    return op


def inline_calls(prog: ir.Program, fn: ir.Function) -> list[ANode]:
    """Flatten ``fn`` with every call spliced in.

    Registers local to a callee are renamed fresh; parameters are
    substituted by the argument registers; labels get a per-instance
    suffix.  Recursive calls are expanded at most twice per function
    name and then abstracted over all their arguments.
    """
    used = [0]
    for f in prog.functions:
        for p in f.params:
            used.append(int(p[1:]))
        for ins in f.body:
            du = ir.instr_defuse(prog, ins.op)
            for r in du.reads | du.writes:
                used.append(int(r[1:]))
    fresh = itertools.count(max(used) + 1)
    inst = itertools.count(1)

    def locals_of(f: ir.Function) -> set[str]:
        w: set[str] = set()
        for ins in f.body:
            w |= ir.instr_defuse(prog, ins.op).writes
        return w - set(f.params)

    def splice(f: ir.Function, m: dict[str, str], suffix: str,
               depth: dict[str, int]) -> list[ANode]:
        out: list[ANode] = []
        for idx, ins in enumerate(f.body):
            op = _rename_op(ins.op, m)
            label = f"{ins.label}{suffix}" if ins.label else None
            if isinstance(op, (ir.BranchEqZero, ir.Jump)):
                op = replace(op, target=op.target + suffix)
            if not isinstance(op, ir.Call):
                out.append(ANode(ir.Instr(op, label, ins.line), f.name, idx,
                                 site=suffix))
                continue
            name, args = op.func, op.args
            if name in prog.externs:
                k = prog.externs[name]
                amo = AbstractMemOp(name, args[:k])
                out.append(ANode(ir.Instr(amo, label, ins.line), f.name, idx,
                                 site=suffix))
                continue
            try:
                callee = prog.function(name)
            except KeyError:
                raise CfgError(f"line {ins.line}: call to undefined function "
                               f"{name!r}") from None
            if depth.get(name, 0) >= 2:
                # Recursion cut: abstract over all arguments.
                amo = AbstractMemOp(name, args)
                out.append(ANode(ir.Instr(amo, label, ins.line), f.name, idx,
                                 site=suffix))
                continue
            if len(args) != len(callee.params):
                raise CfgError(f"line {ins.line}: call to {name!r} with "
                               f"{len(args)} args, expected {len(callee.params)}")
            k = next(inst)
            cm = dict(zip(callee.params, args))
            for r in sorted(locals_of(callee)):
                cm[r] = f"r{next(fresh)}"
            if label is not None:
                # Keep the call site addressable as a branch target.
                out.append(ANode(ir.Instr(ir.Skip(), label, ins.line), f.name,
                                 idx, site=suffix))
            out.extend(splice(callee, cm, f"{suffix}_i{k}",
                              {**depth, name: depth.get(name, 0) + 1}))
        return out

    return splice(fn, {}, "", {fn.name: 1})


# --------------------------------------------------------------------------
# graph construction and loop summarization


def _graphify(flat: list[ANode]) -> tuple[list[ANode], list[list[int]]]:
    labels: dict[str, int] = {}
    for pos, nd in enumerate(flat):
        if nd.instr.label:
            if nd.instr.label in labels:
                raise CfgError(f"duplicate label {nd.instr.label!r} after inlining")
            labels[nd.instr.label] = pos
    succ: list[list[int]] = []
    for pos, nd in enumerate(flat):
        op = nd.instr.op
        nxt = pos + 1 if pos + 1 < len(flat) else EXIT
        if isinstance(op, ir.Jump):
            succ.append([labels[op.target]])
        elif isinstance(op, ir.BranchEqZero):
            t = labels[op.target]
            succ.append([nxt] if t == nxt else [nxt, t])
        else:
            succ.append([nxt])
    return flat, succ


def _node_name(nd: ANode) -> str:
    base = nd.instr.label or f"line {nd.instr.line}"
    return f"{base} ({nd.instr.op})"


def _find_back_edges(nodes, succ):
    g = nx.DiGraph()
    g.add_node(0)
    for u, ss in enumerate(succ):
        for s in ss:
            if s != EXIT:
                g.add_edge(u, s)
    reach = {0} | nx.descendants(g, 0)
    sub = g.subgraph(reach)
    idom = nx.immediate_dominators(sub, 0)

    def dominates(a: int, b: int) -> bool:
        while True:
            if a == b:
                return True
            if b == 0:
                return False
            b = idom[b]

    back = [(u, v) for u, v in sub.edges if dominates(v, u)]
    rest = nx.DiGraph(sub.edges)
    rest.remove_edges_from(back)
    try:
        cyc = nx.find_cycle(rest)
        offenders = sorted({u for u, _ in cyc})
    except nx.NetworkXNoCycle:
        offenders = []
    return back, offenders


def _natural_loop(succ, h: int, srcs: list[int]) -> set[int]:
    pred: dict[int, list[int]] = {}
    for u, ss in enumerate(succ):
        for s in ss:
            if s != EXIT:
                pred.setdefault(s, []).append(u)
    loop = {h}
    stack = [u for u in srcs if u != h]
    while stack:
        n = stack.pop()
        if n in loop:
            continue
        loop.add(n)
        stack.extend(p for p in pred.get(n, []) if p not in loop)
    return loop


def _unroll(nodes, succ, h: int, srcs: list[int]):
    loop = _natural_loop(succ, h, srcs)
    new_nodes = list(nodes)
    new_succ = [list(ss) for ss in succ]
    clone_of: dict[int, int] = {}
    for n in sorted(loop):
        nd = nodes[n]
        new_nodes[n] = ANode(nd.instr, nd.func, nd.index, nd.copy + (1,), nd.site)
        clone_of[n] = len(new_nodes)
        new_nodes.append(ANode(nd.instr, nd.func, nd.index, nd.copy + (2,), nd.site))
        new_succ.append([])
    for u in srcs:  # first copy's back edges continue into the second copy
        new_succ[u] = [clone_of[h] if s == h else s for s in new_succ[u]]
    for n in sorted(loop):
        cs = []
        for s in succ[n]:
            if n in srcs and s == h:
                continue  # second copy's back edge: deleted
            cs.append(clone_of.get(s, s))
        new_succ[clone_of[n]] = cs or [EXIT]
    return new_nodes, new_succ


def summarize_loops(nodes: list[ANode], succ: list[list[int]]):
    """Unroll every natural loop twice; reject irreducible control flow."""
    while True:
        back, offenders = _find_back_edges(nodes, succ)
        if offenders:
            names = ", ".join(_node_name(nodes[u]) for u in offenders)
            raise CfgError(f"irreducible control flow involving {names}")
        if not back:
            return nodes, succ
        h = min(t for _, t in back)
        srcs = sorted({u for u, t in back if t == h})
        nodes, succ = _unroll(nodes, succ, h, srcs)


def build_acfg(prog: ir.Program) -> ACfg:
    """Build the acyclic abstract CFG for a program.

    Single-thread programs are inlined from the entry function; threads
    become disjoint subgraphs with one root each.
    """
    all_nodes: list[ANode] = []
    all_succ: list[list[int]] = []
    roots: list[int] = []
    fns = prog.functions if prog.multithread else [prog.entry_function]
    for fn in fns:
        if prog.multithread:
            flat = [ANode(ins, fn.name, i) for i, ins in enumerate(fn.body)]
        else:
            flat = inline_calls(prog, fn)
        if not flat:
            continue
        nodes, succ = summarize_loops(*_graphify(flat))
        off = len(all_nodes)
        roots.append(off)
        all_nodes.extend(nodes)
        all_succ.extend([s if s == EXIT else s + off for s in ss] for ss in succ)
    acfg = ACfg(all_nodes, all_succ, roots, prog)
    _assert_acyclic(acfg)
    seen: set[tuple] = set()
    for nd in all_nodes:
        assert nd.provenance not in seen, f"provenance not injective: {nd.provenance}"
        seen.add(nd.provenance)
    return acfg


def _assert_acyclic(acfg: ACfg):
    g = nx.DiGraph()
    g.add_nodes_from(acfg.roots)
    for u, ss in enumerate(acfg.succ):
        for s in ss:
            if s != EXIT:
                g.add_edge(u, s)
    reach = set(acfg.roots)
    for r in acfg.roots:
        reach |= nx.descendants(g, r)
    assert nx.is_directed_acyclic_graph(g.subgraph(reach)), \
        "loop summarization left a cycle"


def to_dot(acfg: ACfg) -> str:
    """Render the acfg in graphviz dot format."""
    return "\n".join(_dot_lines(acfg)) + "\n"


def _dot_lines(acfg: ACfg):
    yield "digraph acfg {"
    yield '  node [fontname="monospace"];'
    for i, nd in enumerate(acfg.nodes):
        shape = "diamond" if isinstance(nd.instr.op, ir.BranchEqZero) else "box"
        text = str(nd.instr.op).replace('"', r'\"')
        yield f'  n{i} [shape={shape}, label="{nd.describe()}\\n{text}"];'
    yield '  exit [shape=doublecircle, label="exit"];'
    for i, ss in enumerate(acfg.succ):
        for s in ss:
            yield f"  n{i} -> {'exit' if s == EXIT else f'n{s}'};"
    yield "}"
