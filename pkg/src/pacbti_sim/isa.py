"""Toy instruction set: opcodes, operand layout and the fixed 8-byte encoding.

Every instruction occupies one address unit (``INSN_SIZE`` bytes)::

    byte 0   opcode
    byte 1   a   (destination / first register, or condition code)
    byte 2   b   (second register)
    byte 3   c   (third register; bit 7 set means "use imm instead")
    byte 4-7 imm (little-endian u32)
"""

import enum
import struct
from dataclasses import dataclass

INSN_SIZE = 8
MASK32 = 0xFFFFFFFF

SP = 13
LR = 14
NUM_GENERAL = 13
REG_NAMES = [f"r{i}" for i in range(NUM_GENERAL)] + ["sp", "lr"]
TAG_REG = 12

# Value placed in lr on interrupt entry; branching to it performs exception return.
EXC_RETURN = 0xFFFFFFFD


class Op(enum.IntEnum):
    MOV = 1
    LDR = 2
    STR = 3
    ADD = 4
    SUB = 5
    CMP = 6
    B = 7
    BCOND = 8
    BL = 9
    BX = 10
    BLX = 11
    PUSH = 12
    POP = 13
    PACG = 14
    AUT = 15
    PACBTI = 16
    BTI = 17
    RET = 18
    MSR = 19
    MRS = 20
    SVC = 21
    OUT = 22
    HALT = 23
    NOP = 24


LANDING_PADS = frozenset({Op.PACBTI, Op.BTI})
CALLS = frozenset({Op.BL, Op.BLX})


class Cond(enum.IntEnum):
    EQ = 0
    NE = 1
    LT = 2
    GE = 3
    GT = 4
    LE = 5
    LO = 6
    HS = 7


class SysReg(enum.IntEnum):
    PACBTI_CTRL = 0
    CONTROL = 1


IMM_FLAG = 0x80
_FMT = struct.Struct("<BBBBI")


class UndecodableInstruction(Exception):
    def __init__(self, address, raw):
        super().__init__(f"cannot decode {raw.hex()} at {address:#010x}")
        self.address = address
        self.raw = raw


@dataclass(frozen=True)
class Instruction:
    op: Op
    a: int = 0
    b: int = 0
    c: int = 0
    imm: int = 0
    use_imm: bool = False

    def encode(self) -> bytes:
        c = (self.c & 0x7F) | (IMM_FLAG if self.use_imm else 0)
        return _FMT.pack(int(self.op), self.a, self.b, c, self.imm & MASK32)

    @classmethod
    def decode(cls, raw: bytes, address: int = 0) -> "Instruction":
        if len(raw) != INSN_SIZE:
            raise UndecodableInstruction(address, bytes(raw))
        op, a, b, c, imm = _FMT.unpack(raw)
        try:
            op = Op(op)
        except ValueError:
            raise UndecodableInstruction(address, bytes(raw)) from None
        return cls(op, a, b, c & 0x7F, imm, bool(c & IMM_FLAG))

    def __str__(self):
        return disassemble(self)


def reglist(mask):
    return [i for i in range(15) if mask >> i & 1]


def _r(i):
    return REG_NAMES[i] if i < len(REG_NAMES) else f"?{i}"


def _op2(insn):
    return f"#{insn.imm:#x}" if insn.use_imm else _r(insn.c)


def disassemble(insn: Instruction) -> str:
    op = insn.op
    if op is Op.MOV:
        src = f"#{insn.imm:#x}" if insn.use_imm else _r(insn.b)
        return f"MOV {_r(insn.a)}, {src}"
    if op in (Op.ADD, Op.SUB):
        return f"{op.name} {_r(insn.a)}, {_r(insn.b)}, {_op2(insn)}"
    if op is Op.CMP:
        return f"CMP {_r(insn.a)}, {_op2(insn)}"
    if op in (Op.LDR, Op.STR):
        return f"{op.name} {_r(insn.a)}, {_r(insn.b)}, #{insn.imm}"
    if op in (Op.B, Op.BL):
        return f"{op.name} {insn.imm:#x}"
    if op is Op.BCOND:
        return f"B{Cond(insn.a).name} {insn.imm:#x}"
    if op in (Op.BX, Op.BLX):
        return f"{op.name} {_r(insn.a)}"
    if op in (Op.PUSH, Op.POP):
        return f"{op.name} {{{', '.join(_r(i) for i in reglist(insn.imm))}}}"
    if op is Op.MSR:
        return f"MSR {SysReg(insn.imm).name}, {_r(insn.a)}"
    if op is Op.MRS:
        return f"MRS {_r(insn.a)}, {SysReg(insn.imm).name}"
    if op is Op.SVC:
        return f"SVC #{insn.imm}"
    if op is Op.OUT:
        return f"OUT #{insn.imm:#x}" if insn.use_imm else f"OUT {_r(insn.a)}"
    return op.name
