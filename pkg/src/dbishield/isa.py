"""G32 guest instruction set: opcode table, encoding, classes and cycle costs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum, IntEnum

__all__ = [
    "Op", "OpClass", "Instruction", "DecodeError", "UndefinedOpcode",
    "InvalidRegister", "FieldOverflow", "OP_CLASS", "CLASS_COST",
    "BY_MNEMONIC", "decode", "decode_word", "encode", "encode_word",
    "classify", "cost", "sext16", "is_terminal",
]

WORD = struct.Struct("<I")


class Op(IntEnum):
    NOP = 0x01
    MOVri = 0x02
    MOVHI = 0x03
    MOVrr = 0x04
    ADD = 0x05
    SUB = 0x06
    MUL = 0x07
    DIV = 0x08
    AND = 0x09
    OR = 0x0A
    XOR = 0x0B
    SHL = 0x0C
    SHR = 0x0D
    ADDI = 0x0E
    LD = 0x10
    ST = 0x11
    LDB = 0x12
    STB = 0x13
    JMP = 0x20
    JZ = 0x21
    JNZ = 0x22
    JLT = 0x23
    JGE = 0x24
    JMPR = 0x25
    CALL = 0x26
    CALLR = 0x27
    RET = 0x28
    CMP = 0x30
    CMPI = 0x31
    RDLIP = 0x32
    SYS = 0x40
    PUSH = 0x50
    POP = 0x51
    CALLOUT = 0xF0


class OpClass(str, Enum):
    ALU = "alu"
    MOVE = "move"
    LOAD_STORE = "load_store"
    CONTROL = "control"
    STACK = "stack"
    SYSCALL = "syscall"
    CALLOUT = "callout"
    NOP = "nop"


OP_CLASS: dict[Op, OpClass] = {}
for _op in (Op.ADD, Op.SUB, Op.MUL, Op.DIV, Op.AND, Op.OR, Op.XOR,
            Op.SHL, Op.SHR, Op.ADDI, Op.CMP, Op.CMPI):
    OP_CLASS[_op] = OpClass.ALU
for _op in (Op.MOVri, Op.MOVHI, Op.MOVrr, Op.RDLIP):
    OP_CLASS[_op] = OpClass.MOVE
for _op in (Op.LD, Op.ST, Op.LDB, Op.STB):
    OP_CLASS[_op] = OpClass.LOAD_STORE
for _op in (Op.JMP, Op.JZ, Op.JNZ, Op.JLT, Op.JGE, Op.JMPR,
            Op.CALL, Op.CALLR, Op.RET):
    OP_CLASS[_op] = OpClass.CONTROL
OP_CLASS[Op.PUSH] = OpClass.STACK
OP_CLASS[Op.POP] = OpClass.STACK
OP_CLASS[Op.SYS] = OpClass.SYSCALL
OP_CLASS[Op.CALLOUT] = OpClass.CALLOUT
OP_CLASS[Op.NOP] = OpClass.NOP

CLASS_COST: dict[OpClass, int] = {
    OpClass.ALU: 1,
    OpClass.MOVE: 1,
    OpClass.NOP: 1,
    OpClass.STACK: 1,
    OpClass.LOAD_STORE: 2,
    OpClass.CONTROL: 2,
    OpClass.SYSCALL: 10,
    OpClass.CALLOUT: 0,
}

# Flat lookup tables indexed by opcode byte, used on the hot paths.
OPCODE_VALID = bytes(1 if b in Op._value2member_map_ else 0 for b in range(256))
OPCODE_COST = bytes(
    CLASS_COST[OP_CLASS[Op(b)]] if OPCODE_VALID[b] else 0 for b in range(256)
)

BY_MNEMONIC: dict[str, Op] = {op.name.upper(): op for op in Op}

# Opcodes whose imm16 is sign-extended when executed.
SIGNED_IMM = frozenset({
    Op.ADDI, Op.LD, Op.ST, Op.LDB, Op.STB, Op.JMP, Op.JZ, Op.JNZ,
    Op.JLT, Op.JGE, Op.CALL, Op.CMPI,
})


class DecodeError(Exception):
    pass


class UndefinedOpcode(DecodeError):
    def __init__(self, opcode: int):
        super().__init__(f"undefined opcode 0x{opcode:02X}")
        self.opcode = opcode


class InvalidRegister(DecodeError):
    def __init__(self, field: int):
        super().__init__(f"register field 0x{field:02X} out of range")
        self.field = field


class FieldOverflow(ValueError):
    pass


def sext16(v: int) -> int:
    v &= 0xFFFF
    return v - 0x10000 if v & 0x8000 else v


@dataclass(frozen=True)
class Instruction:
    op: Op
    rd: int = 0
    rs: int = 0
    imm: int = 0
    addr: int = 0

    @property
    def mnemonic(self) -> str:
        return self.op.name

    @property
    def simm(self) -> int:
        return sext16(self.imm)

    def __str__(self) -> str:
        return disasm(self)


def encode_word(ins: Instruction) -> int:
    if not (0 <= ins.rd <= 7 and 0 <= ins.rs <= 7):
        raise FieldOverflow(f"register index out of range in {ins!r}")
    if not 0 <= ins.imm <= 0xFFFF:
        raise FieldOverflow(f"imm16 out of range: {ins.imm}")
    return int(ins.op) | (ins.rd << 12) | (ins.rs << 8) | (ins.imm << 16)


def encode(ins: Instruction) -> bytes:
    return WORD.pack(encode_word(ins))


def decode_word(word: int, at: int = 0) -> Instruction:
    opcode = word & 0xFF
    if not OPCODE_VALID[opcode]:
        raise UndefinedOpcode(opcode)
    regs = (word >> 8) & 0xFF
    if regs & 0x88:
        raise InvalidRegister(regs)
    return Instruction(Op(opcode), regs >> 4, regs & 0x7, word >> 16, at)


def decode(data: bytes, at: int = 0) -> Instruction:
    if at & 3:
        raise ValueError(f"unaligned instruction address 0x{at:08X}")
    return decode_word(WORD.unpack(bytes(data[:4]))[0], at)


def classify(ins: Instruction) -> OpClass:
    return OP_CLASS[ins.op]


def cost(ins: Instruction) -> int:
    return CLASS_COST[OP_CLASS[ins.op]]


def is_terminal(ins: Instruction) -> bool:
    """True for instructions that end a translated block."""
    return OP_CLASS[ins.op] in (OpClass.CONTROL, OpClass.SYSCALL) or ins.op in (
        Op.RDLIP, Op.CALLOUT)


_BRANCHES = frozenset({Op.JMP, Op.JZ, Op.JNZ, Op.JLT, Op.JGE, Op.CALL})


def disasm(ins: Instruction) -> str:
    op, m = ins.op, ins.mnemonic
    if op in (Op.NOP, Op.RET, Op.SYS):
        return m
    if op in (Op.MOVri, Op.MOVHI, Op.SHL, Op.SHR):
        return f"{m} R{ins.rd}, 0x{ins.imm:X}"
    if op in (Op.ADDI, Op.CMPI):
        return f"{m} R{ins.rd}, {ins.simm}"
    if op in (Op.LD, Op.LDB):
        return f"{m} R{ins.rd}, [R{ins.rs}{ins.simm:+d}]"
    if op in (Op.ST, Op.STB):
        return f"{m} [R{ins.rd}{ins.simm:+d}], R{ins.rs}"
    if op in _BRANCHES:
        target = (ins.addr + 4 + ins.simm * 4) & 0xFFFFFFFF
        return f"{m} 0x{target:08X}"
    if op in (Op.JMPR, Op.CALLR, Op.PUSH):
        return f"{m} R{ins.rs}"
    if op in (Op.POP, Op.RDLIP):
        return f"{m} R{ins.rd}"
    if op is Op.CALLOUT:
        return f"{m} {ins.imm}"
    return f"{m} R{ins.rd}, R{ins.rs}"
