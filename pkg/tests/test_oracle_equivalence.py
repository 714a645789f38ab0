"""Exhaustive cross-checks against the independent brute-force oracle.

Two equivalences, each over seeded random programs:

* architectural: the enumerated candidates' (rf, co) projections equal the
  oracle's exhaustive TSO witness set;
* leakage: per candidate, detect_leaks reports exactly the culprit set the
  oracle finds by literally re-testing every implied relation.
"""

from __future__ import annotations

import random

import oracles
from leakcheck import cfg, ir
from leakcheck import events as ev
from leakcheck import executions as ex
from leakcheck import leakage as lk

SINGLE_SEEDS = range(1000, 1350)   # 350 straight-line/branch programs
MULTI_SEEDS = range(5000, 5150)    # 150 two-thread litmus shapes

PRIMS = ("branch", "stl", "psf")


def arch_mismatches(src: str) -> int:
    """Per committed path: candidate (rf, co) projections vs the oracle."""
    prog = ir.parse(src)
    bad = 0
    for struct in ev.enumerate_event_structures(cfg.build_acfg(prog)):
        cands = ex.enumerate_candidates([struct])
        if not cands:
            bad += 1
            continue
        got = {oracles.arch_projection(c) for c in cands}
        want = oracles.tso_witnesses(
            oracles.structure_threads(cands[0]), struct.fence_pairs
        )
        if got != want:
            bad += 1
    return bad


def leak_mismatches(src: str, seed: int) -> int:
    rng = random.Random(seed ^ 0x5EED)
    prog = ir.parse(src)
    graph = cfg.build_acfg(prog)
    bad = 0
    for prim in PRIMS:
        sts = ev.enumerate_event_structures(graph, frozenset({prim}), 8)
        silent = rng.random() < 0.5
        for cand in ex.enumerate_candidates(sts, silent_stores=silent,
                                            d_spec=8):
            got = sorted(
                (w.culprit.kind, w.culprit.edge)
                for w in lk.detect_leaks(cand)
            )
            if got != oracles.leak_findings(cand):
                bad += 1
    return bad


def test_single_thread_programs_match_both_oracles():
    checked = arch_bad = leak_bad = 0
    for seed in SINGLE_SEEDS:
        src = oracles.random_single(random.Random(seed))
        checked += 1
        arch_bad += arch_mismatches(src)
        leak_bad += leak_mismatches(src, seed)
    assert checked == 350
    assert arch_bad == 0
    assert leak_bad == 0


def test_two_thread_programs_match_both_oracles():
    checked = arch_bad = leak_bad = 0
    for seed in MULTI_SEEDS:
        src = oracles.random_multithread(random.Random(seed))
        checked += 1
        arch_bad += arch_mismatches(src)
        leak_bad += leak_mismatches(src, seed)
    assert checked == 150
    assert arch_bad == 0
    assert leak_bad == 0
