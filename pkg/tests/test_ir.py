from __future__ import annotations

import pytest

from leakcheck import ir


def test_load_store_alu_forms():
    prog = ir.parse("r2 <-0\nR A+r2 ->r4\nW tmp <-r4&r2\nr3 <-(r2<r4)\n"
                    "R [r3] ->r5\nW B+0 <-1\n")
    ops = [ins.op for ins in prog.entry_function.body]
    assert isinstance(ops[1], ir.Load)
    assert ops[1].addr == ir.Indexed("A", "r2")
    assert ops[1].dest == "r4"
    assert isinstance(ops[2], ir.Store)
    assert ops[2].addr == ir.Direct("tmp")
    assert ops[2].value.regs == ("r4", "r2")
    assert isinstance(ops[3], ir.Alu)
    assert ops[3].expr.regs == ("r2", "r4")
    assert ops[4].addr == ir.Indirect("r3")
    assert ops[5].addr == ir.Indexed("B", 0)


def test_labels_and_branches():
    prog = ir.parse("i1: R x ->r1\nBEQZ r1, done\nW y <-r1\ndone: skip\n")
    body = prog.entry_function.body
    assert body[0].label == "i1"
    assert body[1].op.target == "done"
    assert body[3].label == "done"
    assert ir.successors(prog.entry_function, 1) == [2, 3]


def test_numeric_branch_target_resolves_to_synthesized_label():
    prog = ir.parse("R x ->r1\nBEQZ r1, 4\nW y <-1\nskip\n")
    body = prog.entry_function.body
    assert body[1].op.target == "L4"
    assert body[3].label == "L4"


def test_fence_protect_call_extern_alias():
    prog = ir.parse(
        "alias (A, B)\nextern probe/1\nR x ->r1\nfence\nlfence\n"
        "protect r1\ncall probe(r1)\nskip\n"
    )
    assert prog.aliases == (("A", "B"),)
    assert prog.externs == {"probe": 1}
    kinds = [type(ins.op) for ins in prog.entry_function.body]
    assert kinds == [ir.Load, ir.Fence, ir.Fence, ir.Protect, ir.Call, ir.Skip]
    assert prog.entry_function.body[1].op.kind == "full"
    assert prog.entry_function.body[2].op.kind == "lfence"


def test_functions_and_entry():
    prog = ir.parse(
        "R x ->r1\ncall f(r1)\n\nfunc f(r1):\nW y <-r1\n"
    )
    assert [f.name for f in prog.functions] == ["main", "f"]
    assert prog.entry == "main"
    assert prog.function("f").params == ("r1",)


def test_threads_set_multithread():
    prog = ir.parse("thread t0:\nW x <-1\nthread t1:\nR x ->r1\n")
    assert prog.multithread
    assert [f.name for f in prog.functions] == ["t0", "t1"]


@pytest.mark.parametrize("src, fragment", [
    ("BEQZ r1, end\nend: skip\n", "read"),              # r1 never assigned
    ("R x ->r1\nBEQZ r1, nowhere\n", "nowhere"),
    ("a: skip\na: skip\n", "duplicate"),
    ("R x ->r1\nQ x\n", "unknown opcode"),
    ("R r1 ->r2\n", "bare register"),
    ("W x <-1\nthread t0:\nW y <-1\n", "mix"),
    ("thread t0:\ncall f()\n", "not allowed"),
    ("lbl:\n", "dangling"),
    ("a:\nb: skip\n", "two labels"),
    ("R x ->r1\nBEQZ r1, 9\n", "out of range"),
    ("", "empty"),
])
def test_parse_errors(src, fragment):
    with pytest.raises(ir.ParseError) as err:
        ir.parse(src)
    assert fragment in str(err.value)


def test_register_defined_on_every_path_required():
    # r2 is only assigned on the fall-through path.
    bad = "R x ->r1\nBEQZ r1, end\nR y ->r2\nend: W z <-r2\n"
    with pytest.raises(ir.ParseError):
        ir.parse(bad)
    good = "R x ->r1\nBEQZ r1, end\nR y ->r2\nW z <-r2\nend: skip\n"
    ir.parse(good)


def test_comments_and_blank_lines_ignored():
    prog = ir.parse("; header\n\nR x ->r1  ; trailing\n")
    assert len(prog.entry_function.body) == 1


def test_pretty_round_trip_is_stable():
    src = ("r9 <-0\ni1: R A+r9 ->r1\nBEQZ r1, out\nW t <-r1&3\n"
           "r2 <-r1\nR [r2] ->r3\nout: skip\n")
    one = ir.pretty(ir.parse(src))
    two = ir.pretty(ir.parse(one))
    assert one == two


def test_defuse_and_address_regs():
    prog = ir.parse("r1 <-0\nR A+r1 ->r2\n")
    # the address register is a read, the destination a write
    op = prog.entry_function.body[1].op
    du = ir.instr_defuse(prog, op)
    assert "r1" in du.reads and du.writes == {"r2"}
    assert ir.address_regs(ir.Indexed("A", "r1")) == frozenset({"r1"})
    assert ir.address_regs(ir.Indexed("A", 3)) == frozenset()
    assert ir.address_regs(ir.Indirect("r7")) == frozenset({"r7"})
    assert ir.addr_base(ir.Indirect("r7")) == "*r7"
