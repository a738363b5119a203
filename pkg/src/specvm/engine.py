"""Speculation exposure: run a program and also execute what it would have
executed down mispredicted branches.

Every architectural conditional branch opens a simulation tree: first the
inverted outcome is followed speculatively (a checkpoint is pushed, the
write log rewinds memory afterwards), then execution resumes normally.
Inside a speculative path every further conditional branch forks the same
way while the tree is below its allowed nesting order, and the correct
outcome then continues at the same depth without a new frame.

A speculative path retires when it reaches a FENCE (before executing it),
executes HALT, faults, or exhausts the speculation window.  The window is
charged per basic block on entry, in chunks of at most ``stride``
instructions, and a chunk is admitted only while the counter is strictly
below the window.  The counter is zeroed when a tree is opened and is part
of every checkpoint, so sibling paths do not consume each other's budget.

How deep a tree may nest is rationed out by ``allowed_order``: the n-th
distinct input to reach a branch may nest up to 1 + max{j : n mod base^j
== 0} levels, so every input gets single-level simulation and ever rarer
inputs get ever deeper trees.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .detect import SpecContext, ViolationRecord
from .isa import InstructionId, Op, Program
from .machine import (
    OUT_FAULT,
    OUT_HALT,
    ExecImage,
    Fault,
    F_STEP,
    Machine,
    MemLayout,
    RunResult,
)

DEFAULT_WINDOW = 250
DEFAULT_STRIDE = 50
DEFAULT_MAX_ORDER = 6
DEFAULT_ORDER_BASE = 4

RETIRE_FENCE = "fence"
RETIRE_HALT = "halt"
RETIRE_FAULT = "fault"
RETIRE_WINDOW = "window"


class EngineError(RuntimeError):
    """Internal consistency failure of the exposure engine."""


@dataclass(frozen=True)
class SpecConfig:
    """Tuning knobs for the exposure engine."""

    window: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    max_order: int = DEFAULT_MAX_ORDER
    order_base: int = DEFAULT_ORDER_BASE
    simulate: bool = True
    max_steps: int = 100_000
    identity: str = "offset"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.max_order < 1:
            raise ValueError("max_order must be at least 1")
        if self.order_base < 2:
            raise ValueError("order_base must be at least 2")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


def allowed_order(n: int, base: int = DEFAULT_ORDER_BASE,
                  cap: int = DEFAULT_MAX_ORDER) -> int:
    """Nesting order granted to the n-th distinct input reaching a branch.

    1 + the largest j with n divisible by base**j, clamped to [1, cap].
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    j = 0
    while n % base == 0:
        n //= base
        j += 1
    return min(1 + j, cap)


class BranchStats:
    """Thread-safe count of distinct fuzzing inputs per conditional branch."""

    def __init__(self, counts: dict[str, int] | None = None):
        self._counts: dict[str, int] = dict(counts or {})
        self._lock = threading.Lock()

    def bump(self, branch: str) -> int:
        with self._lock:
            n = self._counts.get(branch, 0) + 1
            self._counts[branch] = n
            return n

    def count(self, branch: str) -> int:
        with self._lock:
            return self._counts.get(branch, 0)

    def preseed(self, branch: str, n: int) -> None:
        with self._lock:
            self._counts[branch] = n

    def to_dict(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    @staticmethod
    def from_dict(d: dict[str, int]) -> "BranchStats":
        return BranchStats(d)


def full_order_stats(program: Program, config: SpecConfig | None = None) -> BranchStats:
    """Stats preseeded so the next input pushes every branch to the maximum
    nesting order.  Used when one run should simulate as deep as allowed."""
    cfg = config or SpecConfig()
    n = cfg.order_base ** (cfg.max_order - 1) - 1
    stats = BranchStats()
    for iid in program.branch_ids():
        stats.preseed(str(iid), n)
    return stats


@dataclass
class RunTrace:
    """Everything one exposed run produced."""

    result: RunResult
    records: list[ViolationRecord]
    edges: set[tuple[int, int]]
    max_order: dict[str, int]
    arch_steps: int
    spec_steps: int
    retired: dict[str, int] = field(default_factory=dict)

    def deduped(self, mode: str = "offset") -> list[ViolationRecord]:
        from .detect import dedup_key

        seen = set()
        out = []
        for r in self.records:
            k = dedup_key(r, mode)
            if k not in seen:
                seen.add(k)
                out.append(r)
        return out


class ExposureEngine:
    """Drives one Machine with simulation trees at conditional branches."""

    def __init__(self, program: Program | ExecImage,
                 config: SpecConfig | None = None,
                 layout: MemLayout | None = None):
        self.image = program if isinstance(program, ExecImage) else ExecImage(program)
        self.cfg = config or SpecConfig()
        self.layout = layout
        # Per-run state, reset in run()
        self.m: Machine | None = None
        self.ctx: SpecContext | None = None
        self.counter = 0
        self.remaining = 0
        self.budget = 0
        self.acct_stack: list[tuple[int, int]] = []
        self.checkpoints: list[tuple] = []
        self.spec_steps = 0
        self.retired: dict[str, int] = {}

    # -- window accounting -------------------------------------------------

    def _enter_acct(self, block: int) -> None:
        self.remaining = self.image.block_len(block)
        self.budget = 0

    def _charge(self) -> bool:
        """Pay for one speculative instruction; False means the window is
        exhausted and the path must retire."""
        if self.budget == 0:
            if self.counter >= self.cfg.window:
                return False
            if self.remaining > 0:
                chunk = min(self.cfg.stride, self.remaining)
                self.remaining -= chunk
            else:
                chunk = 1  # resumed mid-block with no prepaid budget
            self.counter += chunk
            self.budget = chunk
        self.budget -= 1
        return True

    # -- checkpointing -------------------------------------------------------

    def push_checkpoint(self, branch_iid: str) -> None:
        if len(self.checkpoints) > self.cfg.max_order:
            raise EngineError("checkpoint-overflow")
        m = self.m
        self.checkpoints.append((
            m.regs[:], m.fa, m.fb, m.pc, m.sp, m.halted,
            m.alloc.snapshot(), len(self.ctx.wlog),
            self.counter, self.remaining, self.budget, self.acct_stack[:],
        ))
        self.ctx.branches.append(branch_iid)

    def rollback(self) -> None:
        if not self.checkpoints:
            raise EngineError("internal-log-underflow")
        (regs, fa, fb, pc, sp, halted, asnap, nlog,
         counter, remaining, budget, acct) = self.checkpoints.pop()
        m = self.m
        wlog = self.ctx.wlog
        if len(wlog) < nlog:
            raise EngineError("internal-log-underflow")
        while len(wlog) > nlog:
            addr, old = wlog.pop()
            m.undo_write(addr, old)
        m.regs[:] = regs
        m.fa, m.fb, m.pc, m.sp, m.halted = fa, fb, pc, sp, halted
        m.fault = None
        m.alloc.restore(asnap)
        self.counter = counter
        self.remaining = remaining
        self.budget = budget
        self.acct_stack = acct
        self.ctx.branches.pop()

    # -- speculative execution ----------------------------------------------

    def _spec_run(self, depth: int, order: int) -> str:
        """Execute one speculative path to retirement.  The machine has just
        entered a block through a (possibly forced) transfer."""
        m = self.m
        image = self.image
        code = image.code
        ctx = self.ctx
        cfg_window = self.cfg.window
        while True:
            pc = m.pc
            op = code[pc][0]
            if op == Op.FENCE:
                return RETIRE_FENCE
            if not self._charge():
                return RETIRE_WINDOW
            if op == Op.BR and depth < order:
                self.push_checkpoint(str(image.iid_of[pc]))
                target = m.force_branch(pc, invert=True)
                self._enter_acct(target)
                reason = self._spec_run(depth + 1, order)
                self.retired[reason] = self.retired.get(reason, 0) + 1
                self.rollback()
            was_call = op == Op.CALL
            out = m.step(ctx)
            self.spec_steps += 1
            if out == OUT_HALT:
                return RETIRE_HALT
            if out == OUT_FAULT:
                return RETIRE_FAULT
            if m.entered_block >= 0:
                if was_call:
                    self.acct_stack.append((self.remaining, self.budget))
                self._enter_acct(m.entered_block)
            elif op == Op.RET:
                if self.acct_stack:
                    self.remaining, self.budget = self.acct_stack.pop()
                else:
                    self.remaining, self.budget = 0, 0

    def _open_tree(self, pc: int, order: int) -> None:
        """Simulate the tree rooted at the architectural BR at pc."""
        self.counter = 0
        self.remaining = 0
        self.budget = 0
        self.acct_stack = []
        self.push_checkpoint(str(self.image.iid_of[pc]))
        target = self.m.force_branch(pc, invert=True)
        self._enter_acct(target)
        reason = self._spec_run(1, order)
        self.retired[reason] = self.retired.get(reason, 0) + 1
        self.rollback()

    # -- the exposed run ------------------------------------------------------

    def run(self, input_bytes: bytes, stats: BranchStats | None = None,
            input_id: str | None = None, run_serial: int = 0) -> RunTrace:
        cfg = self.cfg
        image = self.image
        m = self.m = Machine(image, input_bytes, self.layout)
        ctx = self.ctx = SpecContext(input_id=input_id, run_serial=run_serial)
        self.checkpoints = []
        self.spec_steps = 0
        self.retired = {}
        order_of: dict[str, int] = {}
        edges: set[tuple[int, int]] = set()
        cur_block = image.entry_block
        steps = 0
        fault: Fault | None = None
        while steps < cfg.max_steps:
            pc = m.pc
            op = image.code[pc][0]
            if op == Op.BR and cfg.simulate:
                iid = str(image.iid_of[pc])
                order = order_of.get(iid)
                if order is None:
                    if stats is not None:
                        n = stats.bump(iid)
                        order = allowed_order(n, cfg.order_base, cfg.max_order)
                    else:
                        order = cfg.max_order
                    order_of[iid] = order
                self._open_tree(pc, order)
            out = m.step(None)
            steps += 1
            if out == OUT_HALT:
                break
            if out == OUT_FAULT:
                fault = m.fault
                break
            if m.entered_block >= 0:
                edges.add((cur_block, m.entered_block))
                cur_block = m.entered_block
            elif op == Op.RET:
                cur_block = image.block_of[m.pc]
        else:
            fault = Fault(F_STEP, image.iid_of[m.pc] if m.pc < len(image.code) else None)
        pc_iid = image.iid_of[m.pc] if m.pc < len(image.code) else None
        result = RunResult(tuple(m.regs), (m.fa, m.fb), pc_iid, m.sp,
                           m.halted, steps, fault, m)
        return RunTrace(result, ctx.records, edges, order_of, steps,
                        self.spec_steps, self.retired)


def run_with_exposure(program: Program | ExecImage, input_bytes: bytes = b"",
                      config: SpecConfig | None = None,
                      stats: BranchStats | None = None,
                      input_id: str | None = None, run_serial: int = 0,
                      layout: MemLayout | None = None) -> RunTrace:
    """Run one input with speculation exposure and return its trace."""
    return ExposureEngine(program, config, layout).run(
        input_bytes, stats, input_id, run_serial)


__all__ = [
    "DEFAULT_WINDOW", "DEFAULT_STRIDE", "DEFAULT_MAX_ORDER", "DEFAULT_ORDER_BASE",
    "RETIRE_FENCE", "RETIRE_HALT", "RETIRE_FAULT", "RETIRE_WINDOW",
    "EngineError", "SpecConfig", "allowed_order", "BranchStats",
    "full_order_stats", "RunTrace", "ExposureEngine", "run_with_exposure",
]
