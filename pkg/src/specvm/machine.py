"""Architectural interpreter: memory, redzone allocator, access rules, step.

Memory layout (configurable through MemLayout, defaults shown)::

    [0x0000_0000, 0x0000_1000)   scratch page, always mapped, always writable
    [0x0001_0000, ...        )   static data from the program's data directive
    [0x0002_0000, 0x0003_0000)   VM stack, grows down, holds return slots
    [0x0010_0000, +64 MiB    )   heap, bump-allocated, 16-byte redzones

Every LOAD/STORE is 8 bytes wide and classified before it completes:
VALID / SCRATCH accesses proceed, anything else is an out-of-bounds
access.  Architecturally that is a hard fault; under speculation the
detector module decides (see detect.py).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import (
    CONDITIONS,
    WORD_MASK,
    FnRef,
    Imm,
    InstructionId,
    Lab,
    Op,
    Program,
    Reg,
)

# Access classes
A_VALID = 0
A_SCRATCH = 1
A_REDZONE = 2
A_UNMAPPED = 3

ACCESS_NAMES = {A_VALID: "valid", A_SCRATCH: "scratch", A_REDZONE: "redzone", A_UNMAPPED: "unmapped"}

# Fault kinds
F_OOB = "oob-access"
F_DIV = "div-zero"
F_JTAB = "bad-jtab-index"
F_RET = "bad-ret"
F_STACK = "stack-overflow"
F_HEAP = "heap-exhausted"
F_STEP = "step-limit"

# Step outcomes
OUT_OK = 0
OUT_HALT = 1
OUT_FAULT = 2

_PAGE = 4096
_DEFAULT_MAX_STEPS = 100_000


@dataclass(frozen=True)
class MemLayout:
    scratch_base: int = 0
    scratch_size: int = 4096
    static_base: int = 0x1_0000
    stack_lo: int = 0x2_0000
    stack_hi: int = 0x3_0000
    heap_base: int = 0x10_0000
    heap_ceiling: int = 0x10_0000 + 64 * 1024 * 1024
    redzone: int = 16
    referent_window: int = 4096

    def __post_init__(self):
        if self.stack_lo >= self.stack_hi:
            raise ValueError("empty stack region")
        if self.heap_base >= self.heap_ceiling:
            raise ValueError("empty heap region")


@dataclass(frozen=True)
class AccessClass:
    """Classification of one memory access.

    ``referent`` is (ordinal, base, size) of the nearest live allocation when
    one lies within the referent window; ``offset`` is addr - base, signed,
    so negative offsets are underflows.  referent + offset reproduce the
    accessed address exactly.
    """

    kind: int
    referent: tuple[int, int, int] | None = None
    offset: int | None = None

    @property
    def kind_name(self) -> str:
        return ACCESS_NAMES[self.kind]


@dataclass(frozen=True)
class Fault:
    kind: str
    at: InstructionId | None
    access: AccessClass | None = None


class AllocationTable:
    """Bump allocator with redzones; nothing is ever freed."""

    __slots__ = ("layout", "bump", "recs")

    def __init__(self, layout: MemLayout):
        self.layout = layout
        self.bump = layout.heap_base
        self.recs: list[tuple[int, int]] = []  # (base, size)

    def alloc(self, size: int) -> int | None:
        """Return the 16-byte-aligned base of a new allocation, or None when
        the heap ceiling would be crossed."""
        if size < 1:
            size = 1
        base = self.bump
        advance = (size + self.layout.redzone + 15) & ~15
        if base + advance > self.layout.heap_ceiling:
            return None
        self.bump = base + advance
        self.recs.append((base, size))
        return base

    def snapshot(self) -> tuple[int, int]:
        return (self.bump, len(self.recs))

    def restore(self, snap: tuple[int, int]) -> None:
        self.bump, n = snap
        del self.recs[n:]


# ---------------------------------------------------------------------------
# Pre-decoded program image

# Internal operand flag values for the 5th decode slot
IMM = 1
REGOP = 0

RET_ENC_BASE = 0x5EC0_0000_0000


class ExecImage:
    """Flattened, pre-decoded program: the interpreter runs on this.

    code[i] is a 5-tuple (op, a, b, c, f).  Labels are resolved to block
    indices, blocks to (start, length) in the flat instruction array.
    """

    __slots__ = (
        "program", "code", "iid_of", "index_of", "blocks", "block_of",
        "fn_entry", "entry_block", "n_blocks",
    )

    def __init__(self, program: Program):
        self.program = program
        self.code: list[tuple] = []
        self.iid_of: list[InstructionId] = []
        self.index_of: dict[InstructionId, int] = {}
        self.blocks: list[tuple[int, int, str, str]] = []  # start, length, fn, label
        self.block_of: list[int] = []
        self.fn_entry: dict[str, int] = {}  # fn name -> block index

        block_index: dict[tuple[str, str], int] = {}
        for fn, blocks in program.functions.items():
            for block in blocks:
                block_index[(fn, block.label)] = len(self.blocks)
                self.blocks.append((0, len(block.instrs), fn, block.label))
            self.fn_entry[fn] = block_index[(fn, blocks[0].label)]

        # Assign flat indices, then decode.
        flat = 0
        rebuilt = []
        for fn, blocks in program.functions.items():
            for block in blocks:
                bi = block_index[(fn, block.label)]
                rebuilt.append((bi, flat))
                for idx, ins in enumerate(block.instrs):
                    iid = InstructionId(fn, block.label, idx)
                    self.iid_of.append(iid)
                    self.index_of[iid] = flat
                    self.block_of.append(bi)
                    flat += 1
        for bi, start in rebuilt:
            _, length, fn, label = self.blocks[bi]
            self.blocks[bi] = (start, length, fn, label)

        for fn, blocks in program.functions.items():
            for block in blocks:
                for ins in block.instrs:
                    self.code.append(self._decode(fn, ins, block_index))

        self.entry_block = self.fn_entry[program.entry]
        self.n_blocks = len(self.blocks)

    def _decode(self, fn: str, ins, block_index) -> tuple:
        op = ins.op
        o = ins.ops

        def blk(lab: Lab) -> int:
            return block_index[(fn, lab.name)]

        if op in (Op.ADD, Op.SUB, Op.MUL, Op.AND, Op.OR, Op.XOR, Op.SHL, Op.SHR, Op.DIV):
            third = o[2]
            if isinstance(third, Imm):
                return (op, o[0].n, o[1].n, third.v, IMM)
            return (op, o[0].n, o[1].n, third.n, REGOP)
        if op is Op.CONST:
            return (op, o[0].n, o[1].v & WORD_MASK, 0, 0)
        if op is Op.MOV:
            return (op, o[0].n, o[1].n, 0, 0)
        if op is Op.CMP:
            second = o[1]
            if isinstance(second, Imm):
                return (op, o[0].n, second.v, 0, IMM)
            return (op, o[0].n, second.n, 0, REGOP)
        if op is Op.SETCC:
            return (op, o[0].n, CONDITIONS.index(o[1].cc), 0, 0)
        if op is Op.BR:
            return (op, CONDITIONS.index(o[0].cc), blk(o[1]), blk(o[2]), 0)
        if op is Op.JMP:
            return (op, blk(o[0]), 0, 0, 0)
        if op is Op.JTAB:
            return (op, o[0].n, tuple(blk(lab) for lab in o[1:]), 0, 0)
        if op is Op.LOAD:
            return (op, o[0].n, o[1].n, o[2].v, 0)
        if op is Op.STORE:
            return (op, o[0].n, o[1].n, o[2].v, 0)
        if op is Op.ALLOC:
            second = o[1]
            if isinstance(second, Imm):
                return (op, o[0].n, second.v, 0, IMM)
            return (op, o[0].n, second.n, 0, REGOP)
        if op is Op.CALL:
            return (op, o[0].name, 0, 0, 0)
        if op is Op.INPUT:
            return (op, o[0].n, o[1].v, 0, 0)
        if op is Op.INPUTLEN:
            return (op, o[0].n, 0, 0, 0)
        return (op, 0, 0, 0, 0)  # RET, FENCE, HALT

    def block_start(self, bi: int) -> int:
        return self.blocks[bi][0]

    def block_len(self, bi: int) -> int:
        return self.blocks[bi][1]

    def encode_ret(self, flat: int) -> int:
        return RET_ENC_BASE + 8 * flat

    def decode_ret(self, value: int) -> int | None:
        off = value - RET_ENC_BASE
        if off < 0 or off % 8 or off // 8 >= len(self.code):
            return None
        return off // 8


def _cc_eval(cc: int, a: int, b: int) -> bool:
    if cc == 0:
        return a == b
    if cc == 1:
        return a != b
    if cc == 2:
        return a < b
    if cc == 3:
        return a <= b
    if cc == 4:
        return a > b
    return a >= b


class Machine:
    """One VM instance: registers, flags, memory pages, allocator, stack."""

    __slots__ = (
        "image", "layout", "input", "regs", "fa", "fb", "pc", "sp",
        "halted", "pages", "alloc", "fault", "entered_block",
    )

    def __init__(self, image: ExecImage, input_bytes: bytes, layout: MemLayout | None = None):
        self.image = image
        self.layout = layout or MemLayout()
        self.input = input_bytes
        self.regs = [0] * 16
        self.fa = 0
        self.fb = 0
        self.pc = image.block_start(image.entry_block)
        self.sp = self.layout.stack_hi
        self.halted = False
        self.pages: dict[int, bytearray] = {}
        self.alloc = AllocationTable(self.layout)
        self.fault: Fault | None = None
        self.entered_block = -1
        if image.program.data:
            self._blit(self.layout.static_base, image.program.data)

    # -- raw memory -------------------------------------------------------

    def _blit(self, addr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            a = addr + i
            page = self.pages.get(a >> 12)
            if page is None:
                page = self.pages[a >> 12] = bytearray(_PAGE)
            page[a & 0xFFF] = b

    def raw_read8(self, addr: int) -> int:
        off = addr & 0xFFF
        page = self.pages.get(addr >> 12)
        if off <= _PAGE - 8:
            if page is None:
                return 0
            return int.from_bytes(page[off : off + 8], "little")
        v = 0
        for i in range(8):
            a = addr + i
            p = self.pages.get(a >> 12)
            v |= (p[a & 0xFFF] if p is not None else 0) << (8 * i)
        return v

    def raw_write8(self, addr: int, value: int, log: list | None) -> None:
        off = addr & 0xFFF
        if off <= _PAGE - 8:
            page = self.pages.get(addr >> 12)
            if page is None:
                page = self.pages[addr >> 12] = bytearray(_PAGE)
            if log is not None:
                log.append((addr, bytes(page[off : off + 8])))
            page[off : off + 8] = value.to_bytes(8, "little")
            return
        if log is not None:
            old = bytearray(8)
            for i in range(8):
                a = addr + i
                p = self.pages.get(a >> 12)
                old[i] = p[a & 0xFFF] if p is not None else 0
            log.append((addr, bytes(old)))
        for i in range(8):
            a = addr + i
            p = self.pages.get(a >> 12)
            if p is None:
                p = self.pages[a >> 12] = bytearray(_PAGE)
            p[a & 0xFFF] = (value >> (8 * i)) & 0xFF

    def undo_write(self, addr: int, old: bytes) -> None:
        for i, b in enumerate(old):
            a = addr + i
            p = self.pages.get(a >> 12)
            if p is None:
                p = self.pages[a >> 12] = bytearray(_PAGE)
            p[a & 0xFFF] = b

    def canonical_memory(self) -> dict[int, bytes]:
        """Nonzero pages only: the behavioural content of memory."""
        out = {}
        zero = bytes(_PAGE)
        for no, page in sorted(self.pages.items()):
            b = bytes(page)
            if b != zero:
                out[no] = b
        return out

    # -- access classification ---------------------------------------------

    def check_access(self, addr: int, width: int = 8) -> AccessClass:
        kind, ref, off = self._classify(addr, width)
        return AccessClass(kind, ref, off)

    def _classify(self, addr: int, width: int):
        lay = self.layout
        end = addr + width
        # Fully inside one valid region?
        recs = self.alloc.recs
        if addr >= lay.heap_base:
            for base, size in recs:
                if base <= addr and end <= base + size:
                    return A_VALID, None, None
        elif addr >= lay.stack_lo:
            if end <= lay.stack_hi:
                return A_VALID, None, None
        elif addr >= lay.static_base:
            if end <= lay.static_base + len(self.image.program.data):
                return A_VALID, None, None
        elif addr >= lay.scratch_base and end <= lay.scratch_base + lay.scratch_size:
            return A_SCRATCH, None, None
        # Nearest live allocation within the referent window.
        best = None
        best_d = lay.referent_window + 1
        for ordn, (base, size) in enumerate(recs):
            if addr >= base + size:
                d = addr - (base + size - 1)
            elif end <= base:
                d = base - (end - 1)
            else:
                d = 0  # partial overlap
            if d < best_d:
                best_d = d
                best = (ordn, base, size)
        if best is not None and best_d <= lay.redzone:
            return A_REDZONE, best, addr - best[1]
        if best is not None:
            return A_UNMAPPED, best, addr - best[1]
        return A_UNMAPPED, None, None

    def _read8_redzone_zeroed(self, addr: int) -> int:
        """Raw read with bytes that fall inside any redzone band forced to 0."""
        lay = self.layout
        rz = lay.redzone
        v = 0
        for i in range(8):
            a = addr + i
            byte = 0
            in_rz = False
            for base, size in self.alloc.recs:
                if base - rz <= a < base + size + rz and not (base <= a < base + size):
                    in_rz = True
                    break
            if not in_rz:
                p = self.pages.get(a >> 12)
                byte = p[a & 0xFFF] if p is not None else 0
            v |= byte << (8 * i)
        return v

    # -- branch helpers (shared with the exposure engine and the oracle) ---

    def branch_outcome(self, flat: int) -> tuple[bool, int, int]:
        """(condition holds, taken block, fall block) for the BR at flat."""
        _, cc, tb, fb, _ = self.image.code[flat]
        return _cc_eval(cc, self.fa, self.fb), tb, fb

    def force_branch(self, flat: int, invert: bool) -> int:
        """Move pc to the BR's outcome (or its inverse); returns target block."""
        holds, tb, fb = self.branch_outcome(flat)
        if invert:
            holds = not holds
        bi = tb if holds else fb
        self.pc = self.image.block_start(bi)
        self.entered_block = bi
        return bi

    # -- the step function --------------------------------------------------

    def step(self, ctx=None) -> int:
        """Execute one instruction.

        ctx None: architectural semantics (OOB and decode failures fault).
        ctx set: speculative semantics; access and fault policy are delegated
        to the detector, memory writes are logged to ctx.wlog if present.
        Returns OUT_OK, OUT_HALT, or OUT_FAULT (details in self.fault).
        """
        image = self.image
        pc = self.pc
        op, a, b, c, f = image.code[pc]
        regs = self.regs
        self.entered_block = -1

        if op == Op.BR:
            holds = _cc_eval(a, self.fa, self.fb)
            bi = b if holds else c
            self.pc = image.block_start(bi)
            self.entered_block = bi
            return OUT_OK
        if op == Op.CONST:
            regs[a] = b
            self.pc = pc + 1
            return OUT_OK
        if op == Op.LOAD:
            ea = (regs[b] + c) & WORD_MASK
            kind, ref, off = self._classify(ea, 8)
            if kind <= A_SCRATCH:
                regs[a] = self.raw_read8(ea)
                self.pc = pc + 1
                return OUT_OK
            if ctx is None:
                self.fault = Fault(F_OOB, image.iid_of[pc], AccessClass(kind, ref, off))
                return OUT_FAULT
            from .detect import on_speculative_access

            if on_speculative_access(ctx, self, pc, kind, ea, ref, off):
                regs[a] = self._read8_redzone_zeroed(ea)
                self.pc = pc + 1
                return OUT_OK
            self.fault = Fault(F_OOB, image.iid_of[pc], AccessClass(kind, ref, off))
            return OUT_FAULT
        if op == Op.STORE:
            ea = (regs[b] + c) & WORD_MASK
            kind, ref, off = self._classify(ea, 8)
            if kind <= A_SCRATCH:
                self.raw_write8(ea, regs[a], ctx.wlog if ctx is not None else None)
                self.pc = pc + 1
                return OUT_OK
            if ctx is None:
                self.fault = Fault(F_OOB, image.iid_of[pc], AccessClass(kind, ref, off))
                return OUT_FAULT
            from .detect import on_speculative_access

            if on_speculative_access(ctx, self, pc, kind, ea, ref, off):
                self.raw_write8(ea, regs[a], ctx.wlog)
                self.pc = pc + 1
                return OUT_OK
            self.fault = Fault(F_OOB, image.iid_of[pc], AccessClass(kind, ref, off))
            return OUT_FAULT
        if op == Op.ADD:
            regs[a] = (regs[b] + (c if f else regs[c])) & WORD_MASK
        elif op == Op.SUB:
            regs[a] = (regs[b] - (c if f else regs[c])) & WORD_MASK
        elif op == Op.MUL:
            regs[a] = (regs[b] * (c if f else regs[c])) & WORD_MASK
        elif op == Op.AND:
            regs[a] = regs[b] & (c if f else regs[c])
        elif op == Op.OR:
            regs[a] = regs[b] | (c if f else regs[c])
        elif op == Op.XOR:
            regs[a] = regs[b] ^ (c if f else regs[c])
        elif op == Op.SHL:
            regs[a] = (regs[b] << ((c if f else regs[c]) & 63)) & WORD_MASK
        elif op == Op.SHR:
            regs[a] = regs[b] >> ((c if f else regs[c]) & 63)
        elif op == Op.DIV:
            d = c if f else regs[c]
            if d == 0:
                self.fault = Fault(F_DIV, image.iid_of[pc])
                if ctx is not None:
                    from .detect import on_speculative_fault

                    on_speculative_fault(ctx, self, pc, F_DIV, 0)
                return OUT_FAULT
            regs[a] = regs[b] // d
        elif op == Op.CMP:
            self.fa = regs[a]
            self.fb = b if f else regs[b]
        elif op == Op.SETCC:
            regs[a] = 1 if _cc_eval(b, self.fa, self.fb) else 0
        elif op == Op.MOV:
            regs[a] = regs[b]
        elif op == Op.JMP:
            self.pc = image.block_start(a)
            self.entered_block = a
            return OUT_OK
        elif op == Op.JTAB:
            idx = regs[a]
            if idx >= len(b):
                self.fault = Fault(F_JTAB, image.iid_of[pc])
                if ctx is not None:
                    from .detect import on_speculative_fault

                    on_speculative_fault(ctx, self, pc, F_JTAB, idx)
                return OUT_FAULT
            bi = b[idx]
            self.pc = image.block_start(bi)
            self.entered_block = bi
            return OUT_OK
        elif op == Op.ALLOC:
            size = b if f else regs[b]
            base = self.alloc.alloc(size)
            if base is None:
                self.fault = Fault(F_HEAP, image.iid_of[pc])
                if ctx is not None:
                    from .detect import on_speculative_fault

                    on_speculative_fault(ctx, self, pc, F_HEAP, 0)
                return OUT_FAULT
            regs[a] = base
        elif op == Op.CALL:
            new_sp = self.sp - 8
            if new_sp < self.layout.stack_lo:
                self.fault = Fault(F_STACK, image.iid_of[pc])
                if ctx is not None:
                    from .detect import on_speculative_fault

                    on_speculative_fault(ctx, self, pc, F_STACK, 0)
                return OUT_FAULT
            self.raw_write8(new_sp, image.encode_ret(pc + 1), ctx.wlog if ctx is not None else None)
            self.sp = new_sp
            bi = image.fn_entry[a]
            self.pc = image.block_start(bi)
            self.entered_block = bi
            return OUT_OK
        elif op == Op.RET:
            if self.sp >= self.layout.stack_hi:
                self.fault = Fault(F_RET, image.iid_of[pc])
                if ctx is not None:
                    from .detect import on_speculative_fault

                    on_speculative_fault(ctx, self, pc, F_RET, 0)
                return OUT_FAULT
            value = self.raw_read8(self.sp)
            target = image.decode_ret(value)
            if target is None:
                self.fault = Fault(F_RET, image.iid_of[pc])
                if ctx is not None:
                    from .detect import on_speculative_fault

                    on_speculative_fault(ctx, self, pc, F_RET, value)
                return OUT_FAULT
            self.sp += 8
            self.pc = target
            return OUT_OK
        elif op == Op.INPUT:
            regs[a] = self.input[b] if b < len(self.input) else 0
        elif op == Op.INPUTLEN:
            regs[a] = len(self.input)
        elif op == Op.FENCE:
            pass
        elif op == Op.HALT:
            self.halted = True
            return OUT_HALT
        else:  # pragma: no cover
            raise AssertionError(f"undecoded op {op}")
        self.pc = pc + 1
        return OUT_OK


@dataclass
class RunResult:
    """Final architectural state of one run."""

    regs: tuple[int, ...]
    flags: tuple[int, int]
    pc: InstructionId | None
    sp: int
    halted: bool
    steps: int
    fault: Fault | None
    machine: Machine = field(repr=False, default=None)

    def state_fingerprint(self, skip_regs: tuple[int, ...] = (),
                          skip_stack: bool = False) -> tuple:
        """Canonical comparable snapshot of the architectural state.

        skip_stack drops pages of the stack region, whose bytes encode
        instruction positions and therefore differ between two programs
        that behave alike but are laid out differently.
        """
        regs = tuple(v for i, v in enumerate(self.regs) if i not in skip_regs)
        pages = self.machine.canonical_memory()
        if skip_stack:
            lay = self.machine.layout
            lo, hi = lay.stack_lo >> 12, (lay.stack_hi - 1) >> 12
            pages = {no: b for no, b in pages.items() if not lo <= no <= hi}
        mem = tuple(sorted(pages.items()))
        allocs = tuple(self.machine.alloc.recs)
        return (regs, self.flags, self.sp, self.halted, mem, allocs,
                self.machine.alloc.bump)


def _result(m: Machine, steps: int, fault: Fault | None) -> RunResult:
    pc_iid = m.image.iid_of[m.pc] if m.pc < len(m.image.code) else None
    return RunResult(tuple(m.regs), (m.fa, m.fb), pc_iid, m.sp, m.halted,
                     steps, fault, m)


def run_architectural(
    program: Program | ExecImage,
    input_bytes: bytes = b"",
    max_steps: int = _DEFAULT_MAX_STEPS,
    layout: MemLayout | None = None,
) -> RunResult:
    """Run a program with plain architectural semantics to HALT, fault, or
    the step limit."""
    image = program if isinstance(program, ExecImage) else ExecImage(program)
    m = Machine(image, input_bytes, layout)
    steps = 0
    fault = None
    while steps < max_steps:
        out = m.step(None)
        steps += 1
        if out == OUT_HALT:
            break
        if out == OUT_FAULT:
            fault = m.fault
            break
    else:
        fault = Fault(F_STEP, image.iid_of[m.pc] if m.pc < len(image.code) else None)
    return _result(m, steps, fault)


__all__ = [
    "A_VALID", "A_SCRATCH", "A_REDZONE", "A_UNMAPPED", "ACCESS_NAMES",
    "F_OOB", "F_DIV", "F_JTAB", "F_RET", "F_STACK", "F_HEAP", "F_STEP",
    "OUT_OK", "OUT_HALT", "OUT_FAULT",
    "MemLayout", "AccessClass", "Fault", "AllocationTable", "ExecImage",
    "Machine", "RunResult", "run_architectural", "RET_ENC_BASE",
]
