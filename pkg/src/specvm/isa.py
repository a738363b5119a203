"""Instruction set, program IR, text assembler, and structural validation.

The machine is a 16-register, 64-bit, unsigned, wrapping register machine.
Programs are containers of functions; a function is an ordered list of
basic blocks; every block ends in exactly one terminator (BR, JMP, JTAB,
RET, or HALT) and contains no other control transfer.

Text format (one instruction per line, ``;`` starts a comment)::

    data "static bytes"
    fn main:
    entry:
      const r0, 7
      halt

Registers are ``r0`` .. ``r15``.  Immediates are decimal or 0x-hex and may
be negative (stored two's-complement in 64 bits).  Condition codes are the
unsigned comparisons ``eq ne lt le gt ge``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

REG_COUNT = 16
WORD_BITS = 64
WORD_MASK = (1 << WORD_BITS) - 1


class Op(IntEnum):
    CONST = 0
    MOV = 1
    ADD = 2
    SUB = 3
    MUL = 4
    AND = 5
    OR = 6
    XOR = 7
    SHL = 8
    SHR = 9
    DIV = 10
    CMP = 11
    SETCC = 12
    BR = 13
    JMP = 14
    JTAB = 15
    LOAD = 16
    STORE = 17
    ALLOC = 18
    CALL = 19
    RET = 20
    FENCE = 21
    INPUT = 22
    INPUTLEN = 23
    HALT = 24


#: Opcodes that may only appear as the last instruction of a block.
TERMINATORS = frozenset({Op.BR, Op.JMP, Op.JTAB, Op.RET, Op.HALT})

#: Unsigned condition codes, in canonical order.
CONDITIONS = ("eq", "ne", "lt", "le", "gt", "ge")

#: Inverse condition, i.e. the code that holds exactly when the original does not.
INVERSE_CC = {"eq": "ne", "ne": "eq", "lt": "ge", "ge": "lt", "le": "gt", "gt": "le"}

# Operand shape per opcode.  Letters: r register, i immediate, x register or
# immediate, c condition code, l block label, f function name, L one or more
# block labels (JTAB tail).
_SHAPES = {
    Op.CONST: "ri",
    Op.MOV: "rr",
    Op.ADD: "rrx",
    Op.SUB: "rrx",
    Op.MUL: "rrx",
    Op.AND: "rrx",
    Op.OR: "rrx",
    Op.XOR: "rrx",
    Op.SHL: "rrx",
    Op.SHR: "rrx",
    Op.DIV: "rrx",
    Op.CMP: "rx",
    Op.SETCC: "rc",
    Op.BR: "cll",
    Op.JMP: "l",
    Op.JTAB: "rL",
    Op.LOAD: "rri",
    Op.STORE: "rri",
    Op.ALLOC: "rx",
    Op.CALL: "f",
    Op.RET: "",
    Op.FENCE: "",
    Op.INPUT: "ri",
    Op.INPUTLEN: "r",
    Op.HALT: "",
}

_OP_BY_NAME = {op.name.lower(): op for op in Op}


@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self) -> str:
        return f"r{self.n}"


@dataclass(frozen=True)
class Imm:
    v: int

    def __str__(self) -> str:
        return str(self.v)


@dataclass(frozen=True)
class Lab:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Cond:
    cc: str

    def __str__(self) -> str:
        return self.cc


@dataclass(frozen=True)
class FnRef:
    name: str

    def __str__(self) -> str:
        return self.name


Operand = "Reg | Imm | Lab | Cond | FnRef"


@dataclass(frozen=True)
class Instruction:
    op: Op
    ops: tuple = ()

    def __str__(self) -> str:
        if not self.ops:
            return self.op.name.lower()
        return f"{self.op.name.lower()} " + ", ".join(str(o) for o in self.ops)


@dataclass
class BasicBlock:
    label: str
    instrs: list[Instruction] = field(default_factory=list)


@dataclass(frozen=True, order=True)
class InstructionId:
    """Stable address of one instruction: (function, block label, index)."""

    fn: str
    block: str
    idx: int

    def __str__(self) -> str:
        return f"{self.fn}:{self.block}:{self.idx}"

    @staticmethod
    def parse(text: str) -> "InstructionId":
        fn, block, idx = text.split(":")
        return InstructionId(fn, block, int(idx))


@dataclass
class Program:
    """A whole program: functions (name -> ordered blocks), entry, static data."""

    functions: dict[str, list[BasicBlock]] = field(default_factory=dict)
    entry: str = "main"
    data: bytes = b""

    def iter_instructions(self):
        for fn, blocks in self.functions.items():
            for block in blocks:
                for idx, ins in enumerate(block.instrs):
                    yield InstructionId(fn, block.label, idx), ins

    def resolve(self, iid: InstructionId) -> Instruction:
        for block in self.functions[iid.fn]:
            if block.label == iid.block:
                return block.instrs[iid.idx]
        raise KeyError(str(iid))

    def branch_ids(self) -> list[InstructionId]:
        return [iid for iid, ins in self.iter_instructions() if ins.op is Op.BR]


@dataclass(frozen=True)
class Diagnostic:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


class AsmError(Exception):
    """Raised when assembly text cannot be turned into a valid Program."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


@dataclass
class ValidationReport:
    problems: list[tuple[InstructionId | None, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(f"{iid if iid else '<program>'}: {msg}" for iid, msg in self.problems)


# ---------------------------------------------------------------------------
# Parsing


def _strip_comment(line: str) -> str:
    out = []
    in_str = False
    i = 0
    while i < len(line):
        ch = line[i]
        if in_str:
            out.append(ch)
            if ch == "\\" and i + 1 < len(line):
                out.append(line[i + 1])
                i += 2
                continue
            if ch == '"':
                in_str = False
        else:
            if ch == ";":
                break
            out.append(ch)
            if ch == '"':
                in_str = True
        i += 1
    return "".join(out)


_ESCAPES = {"n": b"\n", "t": b"\t", "r": b"\r", "0": b"\x00", "\\": b"\\", '"': b'"'}


def _parse_data_literal(text: str, lineno: int, diags: list[Diagnostic]) -> bytes:
    text = text.strip()
    if len(text) < 2 or not text.startswith('"') or not text.endswith('"'):
        diags.append(Diagnostic(lineno, "data directive expects a quoted string"))
        return b""
    body = text[1:-1]
    out = bytearray()
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            if i + 1 >= len(body):
                diags.append(Diagnostic(lineno, "dangling escape in data string"))
                break
            nxt = body[i + 1]
            if nxt == "x":
                if i + 3 >= len(body):
                    diags.append(Diagnostic(lineno, "truncated \\x escape in data string"))
                    break
                try:
                    out.append(int(body[i + 2 : i + 4], 16))
                except ValueError:
                    diags.append(Diagnostic(lineno, f"bad hex escape \\x{body[i + 2:i + 4]}"))
                i += 4
                continue
            if nxt in _ESCAPES:
                out += _ESCAPES[nxt]
                i += 2
                continue
            diags.append(Diagnostic(lineno, f"unknown escape \\{nxt}"))
            i += 2
            continue
        out.append(ord(ch) & 0xFF)
        i += 1
    return bytes(out)


def _is_name(tok: str) -> bool:
    if not tok:
        return False
    if not (tok[0].isalpha() or tok[0] == "_"):
        return False
    return all(c.isalnum() or c in "_." for c in tok[1:])


def _parse_operand(kind: str, tok: str, lineno: int, diags: list[Diagnostic]):
    tok = tok.strip()
    if kind == "r":
        if tok.startswith("r") and tok[1:].isdigit():
            n = int(tok[1:])
            if n >= REG_COUNT:
                diags.append(Diagnostic(lineno, f"register {tok} out of range (r0..r{REG_COUNT - 1})"))
                return Reg(0)
            return Reg(n)
        diags.append(Diagnostic(lineno, f"expected register, got '{tok}'"))
        return Reg(0)
    if kind in ("i", "x"):
        if kind == "x" and tok.startswith("r") and tok[1:].isdigit():
            return _parse_operand("r", tok, lineno, diags)
        try:
            return Imm(int(tok, 0) & WORD_MASK)
        except ValueError:
            diags.append(Diagnostic(lineno, f"expected immediate, got '{tok}'"))
            return Imm(0)
    if kind == "c":
        if tok in CONDITIONS:
            return Cond(tok)
        diags.append(Diagnostic(lineno, f"unknown condition code '{tok}'"))
        return Cond("eq")
    if kind == "l":
        if _is_name(tok):
            return Lab(tok)
        diags.append(Diagnostic(lineno, f"bad label name '{tok}'"))
        return Lab("__bad")
    if kind == "f":
        if _is_name(tok):
            return FnRef(tok)
        diags.append(Diagnostic(lineno, f"bad function name '{tok}'"))
        return FnRef("__bad")
    raise AssertionError(kind)


def parse_program(text: str) -> Program:
    """Assemble source text into a Program.

    Raises AsmError carrying line-numbered diagnostics when the text is not
    syntactically well formed or the resulting program fails validation.
    """
    diags: list[Diagnostic] = []
    prog = Program(functions={}, entry="", data=b"")
    data = bytearray()

    cur_fn: str | None = None
    cur_block: BasicBlock | None = None
    iid_lines: dict[InstructionId, int] = {}
    block_lines: dict[tuple[str, str], int] = {}

    def close_block():
        nonlocal cur_block
        cur_block = None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("fn ") and line.endswith(":"):
            name = line[3:-1].strip()
            if not _is_name(name):
                diags.append(Diagnostic(lineno, f"bad function name '{name}'"))
                name = f"__bad{lineno}"
            if name in prog.functions:
                diags.append(Diagnostic(lineno, f"duplicate function '{name}'"))
            close_block()
            prog.functions[name] = []
            if not prog.entry:
                prog.entry = name
            cur_fn = name
            continue
        if line.startswith("data ") or line == "data":
            if cur_fn is not None:
                diags.append(Diagnostic(lineno, "data directive must appear outside functions"))
                continue
            data += _parse_data_literal(line[4:], lineno, diags)
            continue
        if line.endswith(":") and " " not in line:
            label = line[:-1]
            if cur_fn is None:
                diags.append(Diagnostic(lineno, f"label '{label}' outside any function"))
                continue
            if not _is_name(label):
                diags.append(Diagnostic(lineno, f"bad label name '{label}'"))
                label = f"__bad{lineno}"
            if any(b.label == label for b in prog.functions[cur_fn]):
                diags.append(Diagnostic(lineno, f"duplicate label '{label}' in fn {cur_fn}"))
            cur_block = BasicBlock(label)
            prog.functions[cur_fn].append(cur_block)
            block_lines[(cur_fn, label)] = lineno
            continue
        # instruction line
        if cur_fn is None or cur_block is None:
            diags.append(Diagnostic(lineno, f"instruction outside a block: '{line}'"))
            continue
        parts = line.split(None, 1)
        opname = parts[0].lower()
        op = _OP_BY_NAME.get(opname)
        if op is None:
            diags.append(Diagnostic(lineno, f"unknown opcode '{parts[0]}'"))
            continue
        shape = _SHAPES[op]
        rest = parts[1] if len(parts) > 1 else ""
        toks = [t.strip() for t in rest.split(",")] if rest.strip() else []
        operands: list = []
        if shape.endswith("L"):
            fixed = shape[:-1]
            if len(toks) < len(fixed) + 1:
                diags.append(Diagnostic(lineno, f"{opname} needs at least {len(fixed) + 1} operands"))
                continue
            for kind, tok in zip(fixed, toks):
                operands.append(_parse_operand(kind, tok, lineno, diags))
            for tok in toks[len(fixed):]:
                operands.append(_parse_operand("l", tok, lineno, diags))
        else:
            if len(toks) != len(shape):
                diags.append(
                    Diagnostic(lineno, f"{opname} expects {len(shape)} operand(s), got {len(toks)}")
                )
                continue
            for kind, tok in zip(shape, toks):
                operands.append(_parse_operand(kind, tok, lineno, diags))
        ins = Instruction(op, tuple(operands))
        iid_lines[InstructionId(cur_fn, cur_block.label, len(cur_block.instrs))] = lineno
        cur_block.instrs.append(ins)

    prog.data = bytes(data)
    if not prog.functions:
        diags.append(Diagnostic(0, "program has no functions"))
        raise AsmError(diags)

    report = validate(prog)
    for iid, msg in report.problems:
        if iid is not None and iid in iid_lines:
            diags.append(Diagnostic(iid_lines[iid], msg))
        elif iid is not None and (iid.fn, iid.block) in block_lines:
            diags.append(Diagnostic(block_lines[(iid.fn, iid.block)], msg))
        else:
            diags.append(Diagnostic(0, msg))
    if diags:
        diags.sort(key=lambda d: d.line)
        raise AsmError(diags)
    return prog


# ---------------------------------------------------------------------------
# Emission


def _escape_data(data: bytes) -> str:
    out = []
    for b in data:
        ch = chr(b)
        if ch == "\\":
            out.append("\\\\")
        elif ch == '"':
            out.append('\\"')
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\r":
            out.append("\\r")
        elif 32 <= b < 127:
            out.append(ch)
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def emit_text(p: Program) -> str:
    """Render a Program in canonical text form.

    parse_program(emit_text(p)) reproduces p structurally.  The entry
    function is emitted first; remaining functions keep insertion order.
    """
    lines: list[str] = []
    if p.data:
        lines.append(f'data "{_escape_data(p.data)}"')
    names = [p.entry] + [n for n in p.functions if n != p.entry]
    for name in names:
        lines.append(f"fn {name}:")
        for block in p.functions[name]:
            lines.append(f"{block.label}:")
            for ins in block.instrs:
                lines.append(f"  {ins}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation


def _check_operands(iid: InstructionId, ins: Instruction, labels: set[str],
                    functions: dict, problems: list) -> None:
    shape = _SHAPES[ins.op]
    if shape.endswith("L"):
        fixed = shape[:-1]
        if len(ins.ops) < len(fixed) + 1:
            problems.append((iid, f"{ins.op.name} needs at least {len(fixed) + 1} operands"))
            return
        kinds = fixed + "l" * (len(ins.ops) - len(fixed))
    else:
        if len(ins.ops) != len(shape):
            problems.append((iid, f"{ins.op.name} expects {len(shape)} operand(s)"))
            return
        kinds = shape
    for kind, opnd in zip(kinds, ins.ops):
        if kind == "r" and not (isinstance(opnd, Reg) and 0 <= opnd.n < REG_COUNT):
            problems.append((iid, f"operand {opnd} is not a valid register"))
        elif kind == "i" and not isinstance(opnd, Imm):
            problems.append((iid, f"operand {opnd} is not an immediate"))
        elif kind == "x" and not isinstance(opnd, (Reg, Imm)):
            problems.append((iid, f"operand {opnd} is neither register nor immediate"))
        elif kind == "x" and isinstance(opnd, Reg) and not 0 <= opnd.n < REG_COUNT:
            problems.append((iid, f"operand {opnd} is not a valid register"))
        elif kind == "c" and not (isinstance(opnd, Cond) and opnd.cc in CONDITIONS):
            problems.append((iid, f"operand {opnd} is not a condition code"))
        elif kind == "l":
            if not isinstance(opnd, Lab):
                problems.append((iid, f"operand {opnd} is not a label"))
            elif opnd.name not in labels:
                problems.append((iid, f"unresolved label '{opnd.name}'"))
        elif kind == "f":
            if not isinstance(opnd, FnRef):
                problems.append((iid, f"operand {opnd} is not a function name"))
            elif opnd.name not in functions:
                problems.append((iid, f"call to missing function '{opnd.name}'"))


def validate(p: Program) -> ValidationReport:
    """Check every structural invariant; deterministic and side-effect free."""
    problems: list[tuple[InstructionId | None, str]] = []
    if p.entry not in p.functions:
        problems.append((None, f"entry function '{p.entry}' does not exist"))
    for fn, blocks in p.functions.items():
        if not blocks:
            problems.append((None, f"function '{fn}' has no blocks"))
            continue
        seen = set()
        for block in blocks:
            if block.label in seen:
                problems.append((InstructionId(fn, block.label, 0),
                                 f"duplicate label '{block.label}'"))
            seen.add(block.label)
        labels = {b.label for b in blocks}
        for block in blocks:
            if not block.instrs:
                problems.append((InstructionId(fn, block.label, 0), "empty block"))
                continue
            for idx, ins in enumerate(block.instrs):
                iid = InstructionId(fn, block.label, idx)
                last = idx == len(block.instrs) - 1
                if ins.op in TERMINATORS and not last:
                    problems.append((iid, "control transfer before block end"))
                if last and ins.op not in TERMINATORS:
                    problems.append((iid, "missing terminator at block end"))
                _check_operands(iid, ins, labels, p.functions, problems)
    return ValidationReport(problems)


__all__ = [
    "REG_COUNT",
    "WORD_MASK",
    "Op",
    "TERMINATORS",
    "CONDITIONS",
    "INVERSE_CC",
    "Reg",
    "Imm",
    "Lab",
    "Cond",
    "FnRef",
    "Instruction",
    "BasicBlock",
    "InstructionId",
    "Program",
    "Diagnostic",
    "AsmError",
    "ValidationReport",
    "parse_program",
    "emit_text",
    "validate",
]
