"""Seeded random program generator for differential and transparency tests.

Every generated program terminates by construction: branches, jumps, and
jump tables only target blocks that come later in the same function, and
calls only reach functions generated after the caller, so there are no
loops and no recursion.  Architectural faults (division by zero, an out
of range access that leaves the mapped regions) are possible and fine;
both executors under test must agree on them.

Registers r0 through r13 are used, leaving r14 and r15 free so the same
programs can be pushed through the masking hardener.
"""

from __future__ import annotations

import random

from specvm.isa import (
    BasicBlock,
    Cond,
    CONDITIONS,
    FnRef,
    Imm,
    Instruction,
    Lab,
    Op,
    Program,
    Reg,
    validate,
)

ARITH = (Op.ADD, Op.SUB, Op.MUL, Op.AND, Op.OR, Op.XOR, Op.SHL, Op.SHR)

# Offsets used for random loads and stores against a 24-byte allocation:
# a healthy mix of in-bounds, redzone, and far out-of-bounds targets.
OFFSETS = (0, 8, 16, 23, 24, 32, -1, -8, 100, 5000)


def _rand_value(rng: random.Random) -> int:
    return rng.choice((0, 1, 2, 7, 8, 16, 255, rng.randrange(1 << 16)))


class _FnGen:
    def __init__(self, rng: random.Random, name: str, callees: list[str], is_entry: bool):
        self.rng = rng
        self.name = name
        self.callees = callees
        self.is_entry = is_entry
        self.alloc_regs: list[int] = []

    def _body_instr(self) -> list[Instruction]:
        rng = self.rng
        roll = rng.random()
        dst = rng.randrange(14)
        if roll < 0.18:
            return [Instruction(Op.CONST, (Reg(dst), Imm(_rand_value(rng))))]
        if roll < 0.30:
            src = Reg(rng.randrange(14))
            third = Reg(rng.randrange(14)) if rng.random() < 0.5 else Imm(_rand_value(rng))
            return [Instruction(rng.choice(ARITH), (Reg(dst), src, third))]
        if roll < 0.40:
            return [Instruction(Op.INPUT, (Reg(dst), Imm(rng.randrange(8))))]
        if roll < 0.46:
            return [Instruction(Op.INPUTLEN, (Reg(dst),))]
        if roll < 0.54:
            self.alloc_regs.append(dst)
            return [Instruction(Op.ALLOC, (Reg(dst), Imm(24)))]
        if roll < 0.60:
            return [Instruction(Op.SETCC, (Reg(dst), Cond(rng.choice(CONDITIONS))))]
        if roll < 0.66 and rng.random() < 0.3:
            src = Reg(rng.randrange(14))
            return [Instruction(Op.DIV, (Reg(dst), src, Reg(rng.randrange(14))))]
        if roll < 0.85 and self.alloc_regs:
            base = rng.choice(self.alloc_regs)
            off = rng.choice(OFFSETS)
            if rng.random() < 0.5:
                return [Instruction(Op.LOAD, (Reg(dst), Reg(base), Imm(off)))]
            return [Instruction(Op.STORE, (Reg(dst), Reg(base), Imm(off)))]
        return [Instruction(Op.MOV, (Reg(dst), Reg(rng.randrange(14))))]

    def _compare(self) -> list[Instruction]:
        """A cmp whose left side usually carries an input byte."""
        rng = self.rng
        reg = rng.randrange(14)
        out = []
        if rng.random() < 0.7:
            out.append(Instruction(Op.INPUT, (Reg(reg), Imm(rng.randrange(4)))))
        rhs = Imm(rng.choice((0, 1, 4, 8, 16))) if rng.random() < 0.7 else Reg(rng.randrange(14))
        out.append(Instruction(Op.CMP, (Reg(reg), rhs)))
        return out

    def build(self, n_blocks: int) -> list[BasicBlock]:
        rng = self.rng
        labels = [f"b{i}" for i in range(n_blocks)]
        blocks = []
        for i, label in enumerate(labels):
            instrs: list[Instruction] = []
            for _ in range(rng.randrange(1, 5)):
                instrs.extend(self._body_instr())
            if self.callees and rng.random() < 0.35:
                instrs.append(Instruction(Op.CALL, (FnRef(rng.choice(self.callees)),)))
            later = labels[i + 1 :]
            if not later:
                term = Instruction(Op.HALT) if self.is_entry else Instruction(Op.RET)
            else:
                roll = rng.random()
                if roll < 0.55:
                    instrs.extend(self._compare())
                    taken, fall = rng.choice(later), rng.choice(later)
                    term = Instruction(
                        Op.BR, (Cond(rng.choice(CONDITIONS)), Lab(taken), Lab(fall))
                    )
                elif roll < 0.70 and len(later) >= 2:
                    idx = rng.randrange(14)
                    instrs.append(Instruction(Op.INPUT, (Reg(idx), Imm(0))))
                    instrs.append(Instruction(Op.AND, (Reg(idx), Reg(idx), Imm(1))))
                    targets = tuple(Lab(rng.choice(later)) for _ in range(2))
                    term = Instruction(Op.JTAB, (Reg(idx),) + targets)
                else:
                    term = Instruction(Op.JMP, (Lab(rng.choice(later)),))
            instrs.append(term)
            blocks.append(BasicBlock(label, instrs))
        return blocks


def random_program(seed: int) -> Program:
    """Deterministically generate a small, always-terminating program."""
    rng = random.Random(seed)
    n_fns = rng.randrange(1, 4)
    names = [f"f{i}" for i in range(n_fns)]
    functions = {}
    for i, name in enumerate(names):
        gen = _FnGen(rng, name, callees=names[i + 1 :], is_entry=(i == 0))
        functions[name] = gen.build(rng.randrange(2, 5))
    prog = Program(functions=functions, entry=names[0], data=bytes(rng.randrange(256) for _ in range(rng.randrange(0, 9))))
    report = validate(prog)
    assert report.ok, str(report)
    return prog


def random_input(seed: int) -> bytes:
    rng = random.Random(seed ^ 0x5EED)
    return bytes(rng.randrange(256) for _ in range(rng.randrange(0, 9)))
