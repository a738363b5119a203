"""Violation records and the speculative access policy.

A violation is an out-of-bounds data access ("data-oob") or a corrupted
control transfer ("code-ptr") that happens while the machine is executing
down a mispredicted path.  Records carry enough context to aggregate,
deduplicate, and replay: the offending instruction, the address, the
nearest live allocation (the referent), and the stack of mispredicted
branches that were active when the access fired.

Speculative policy, applied by Machine.step when a ctx is passed:

===============  ===========================================
event            action
===============  ===========================================
redzone access   record data-oob, proceed (loads see zeros)
unmapped access  record data-oob, fault (path is abandoned)
bad RET word     record code-ptr, fault
bad JTAB index   record code-ptr, fault
div by zero      fault silently
stack overflow   fault silently
heap exhausted   fault silently
===============  ===========================================
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import InstructionId
from .machine import A_REDZONE, F_JTAB, F_RET, Machine

KIND_DATA = "data-oob"
KIND_CODE = "code-ptr"

IDENTITY_MODES = ("offset", "raw")


@dataclass(frozen=True)
class ViolationRecord:
    """One observed speculative violation."""

    kind: str
    offending: str  # "fn:block:idx" of the faulting instruction
    addr: int  # accessed address, or offending value for code-ptr
    referent: tuple[int, int, int] | None  # (ordinal, base, size)
    offset: int | None  # addr - referent base, signed
    branches: tuple[str, ...]  # active mispredictions, outermost first
    order: int  # == len(branches)
    input_id: str | None = None
    run: int = 0
    detail: str = ""

    def identity(self, mode: str = "offset") -> tuple:
        """Stable location identity: allocation-relative when a referent is
        known, raw address otherwise."""
        if mode not in IDENTITY_MODES:
            raise ValueError(f"unknown identity mode {mode!r}")
        if mode == "offset" and self.referent is not None:
            return ("ref", self.referent[0], self.offset)
        return ("addr", self.addr)

    def to_wire(self) -> dict:
        ref = None
        if self.referent is not None:
            ref = {"ord": self.referent[0], "base": self.referent[1],
                   "size": self.referent[2]}
        return {
            "kind": self.kind,
            "offending": self.offending,
            "addr": f"0x{self.addr:x}",
            "referent": ref,
            "offset": self.offset,
            "branches": list(self.branches),
            "order": self.order,
            "input": self.input_id,
            "run": self.run,
            "detail": self.detail,
        }

    @staticmethod
    def from_wire(d: dict) -> "ViolationRecord":
        ref = d.get("referent")
        referent = (ref["ord"], ref["base"], ref["size"]) if ref else None
        return ViolationRecord(
            kind=d["kind"],
            offending=d["offending"],
            addr=int(d["addr"], 16),
            referent=referent,
            offset=d.get("offset"),
            branches=tuple(d.get("branches", ())),
            order=d.get("order", len(d.get("branches", ()))),
            input_id=d.get("input"),
            run=d.get("run", 0),
            detail=d.get("detail", ""),
        )


def dedup_key(v: ViolationRecord, mode: str = "offset") -> tuple:
    """(offending, kind, identity): two records with the same key describe
    the same vulnerable access."""
    return (v.offending, v.kind, v.identity(mode))


@dataclass
class SpecContext:
    """Mutable per-run state handed to Machine.step during speculation."""

    records: list[ViolationRecord] = field(default_factory=list)
    branches: list[str] = field(default_factory=list)
    wlog: list[tuple[int, bytes]] = field(default_factory=list)
    input_id: str | None = None
    run_serial: int = 0

    @property
    def order(self) -> int:
        return len(self.branches)


def on_speculative_access(ctx: SpecContext, m: Machine, pc: int, kind: int,
                          addr: int, referent, offset) -> bool:
    """Handle an out-of-bounds data access on a speculative path.

    Returns True when execution may proceed past the access (redzones),
    False when the path must be abandoned (unmapped).
    """
    iid = str(m.image.iid_of[pc])
    ctx.records.append(ViolationRecord(
        kind=KIND_DATA,
        offending=iid,
        addr=addr,
        referent=referent,
        offset=offset,
        branches=tuple(ctx.branches),
        order=len(ctx.branches),
        input_id=ctx.input_id,
        run=ctx.run_serial,
        detail="redzone" if kind == A_REDZONE else "unmapped",
    ))
    return kind == A_REDZONE


def on_speculative_fault(ctx: SpecContext, m: Machine, pc: int, fkind: str,
                         value: int) -> None:
    """Handle a non-access fault on a speculative path.  Corrupted control
    transfers become code-ptr records; resource faults stay silent."""
    if fkind not in (F_RET, F_JTAB):
        return
    iid = str(m.image.iid_of[pc])
    ctx.records.append(ViolationRecord(
        kind=KIND_CODE,
        offending=iid,
        addr=value,
        referent=None,
        offset=None,
        branches=tuple(ctx.branches),
        order=len(ctx.branches),
        input_id=ctx.input_id,
        run=ctx.run_serial,
        detail=fkind,
    ))


__all__ = [
    "KIND_DATA", "KIND_CODE", "IDENTITY_MODES",
    "ViolationRecord", "SpecContext", "dedup_key",
    "on_speculative_access", "on_speculative_fault",
]
