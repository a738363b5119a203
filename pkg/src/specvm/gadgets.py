"""Built-in vulnerable programs for tests, demos, and benchmarks.

Eighteen small victim programs, each bundling an assembly source, one
input that architecturally stays in bounds but leaks under misprediction
(the trigger), one input that is clean even speculatively (the safe
input), and the violation the trigger is expected to surface: the
offending instruction, the violation kind, and the minimum nesting order
at which it becomes visible.

Fixtures 1 through 15 form the main corpus that the hardening passes are
benchmarked against; 16 through 18 stress rarer shapes (two-sided range
checks, cross-function double checks, jump tables).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .isa import Program, parse_program

MAIN_IDS = tuple(range(1, 16))
AUX_IDS = (16, 17, 18)


class GadgetError(KeyError):
    pass


@dataclass(frozen=True)
class GadgetExpect:
    """The violation a gadget's trigger input is expected to produce."""

    offending: str
    kind: str
    min_order: int


@dataclass(frozen=True)
class GadgetFixture:
    id: int
    name: str
    source: str
    trigger: bytes
    safe: bytes
    expected: GadgetExpect

    @property
    def program(self) -> Program:
        return _parse_cached(self.id)


# id -> (name, trigger, safe, offending iid, kind, min_order)
_CATALOG: dict[int, tuple] = {
    1: ("bounds_check_bypass", b"\x09", b"\x03", "main:access:2", "data-oob", 1),
    2: ("guarded_call", b"\x09", b"\x03", "read_elem:entry:2", "data-oob", 1),
    3: ("clamp_after_return", b"\x09", b"\x03", "main:entry:6", "data-oob", 1),
    4: ("le_guard", b"\x09", b"\x03", "main:access:2", "data-oob", 1),
    5: ("length_from_memory", b"\x09", b"\x03", "main:access:2", "data-oob", 1),
    6: ("oob_store", b"\x09", b"\x03", "main:wr:3", "data-oob", 1),
    7: ("insufficient_mask", b"\xc8", b"\x03", "main:access:3", "data-oob", 1),
    8: ("composite_index", b"\x14\x00", b"\x02\x02", "main:access:3", "data-oob", 1),
    9: ("flag_in_memory", b"\x09", b"\x03", "main:access:2", "data-oob", 1),
    10: ("value_dependent_branch", b"\x09", b"\x03", "main:access:2", "data-oob", 1),
    11: ("loop_exit", b"\x07", b"\x00", "main:body:2", "data-oob", 2),
    12: ("wide_index", b"\x00\x01", b"\x03\x00", "main:access:2", "data-oob", 1),
    13: ("double_check", b"\x09", b"\x03", "main:access:2", "data-oob", 2),
    14: ("shift_index", b"\x08", b"\x03", "main:access:4", "data-oob", 1),
    15: ("pointer_slot", b"\x09", b"\x03", "main:access:3", "data-oob", 1),
    16: ("range_check_pair", b"\x82", b"\x32", "main:access:1", "data-oob", 1),
    17: ("cross_function_check", b"\x09", b"\x03", "fetch:ok:2", "data-oob", 2),
    18: ("jump_table", b"\x07", b"\x01", "main:dispatch:0", "code-ptr", 1),
}


def gadget_ids() -> tuple[int, ...]:
    return tuple(sorted(_CATALOG))


@lru_cache(maxsize=None)
def _load_source(gid: int) -> str:
    name = _CATALOG[gid][0]
    path = resources.files("specvm").joinpath("gadgets_data", f"g{gid:02d}_{name}.sasm")
    return path.read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def _parse_cached(gid: int) -> Program:
    return parse_program(_load_source(gid))


def builtin_gadget(gid: int) -> GadgetFixture:
    """Fixture for one built-in gadget id (see gadget_ids)."""
    if gid not in _CATALOG:
        raise GadgetError(f"no builtin gadget with id {gid}")
    name, trigger, safe, offending, kind, min_order = _CATALOG[gid]
    return GadgetFixture(gid, name, _load_source(gid), trigger, safe,
                         GadgetExpect(offending, kind, min_order))


__all__ = [
    "MAIN_IDS", "AUX_IDS", "GadgetError", "GadgetExpect", "GadgetFixture",
    "gadget_ids", "builtin_gadget",
]
