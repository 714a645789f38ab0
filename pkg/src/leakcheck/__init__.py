"""Microarchitectural leakage analysis for litmus programs.

Pipeline: parse (.lcm litmus IR) -> abstract CFG (loops summarized, calls
inlined) -> event structures under a speculative fetch order -> candidate
executions over architectural and extra-architectural state -> leak
detection and transmitter classification -> lfence repair.
"""

__version__ = "0.1.0"

from .ir import parse, pretty, ParseError  # noqa: F401
