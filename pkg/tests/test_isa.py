import itertools
import struct

import pytest

from dbishield.isa import (CLASS_COST, FieldOverflow, Instruction, InvalidRegister, Op,
                           OpClass, UndefinedOpcode, classify, cost, decode, decode_word,
                           encode, encode_word)

# Independent opcode table, written out by hand.
TABLE = {
    "NOP": 0x01, "MOVri": 0x02, "MOVHI": 0x03, "MOVrr": 0x04, "ADD": 0x05, "SUB": 0x06,
    "MUL": 0x07, "DIV": 0x08, "AND": 0x09, "OR": 0x0A, "XOR": 0x0B, "SHL": 0x0C,
    "SHR": 0x0D, "ADDI": 0x0E, "LD": 0x10, "ST": 0x11, "LDB": 0x12, "STB": 0x13,
    "JMP": 0x20, "JZ": 0x21, "JNZ": 0x22, "JLT": 0x23, "JGE": 0x24, "JMPR": 0x25,
    "CALL": 0x26, "CALLR": 0x27, "RET": 0x28, "CMP": 0x30, "CMPI": 0x31, "RDLIP": 0x32,
    "SYS": 0x40, "PUSH": 0x50, "POP": 0x51, "CALLOUT": 0xF0,
}
CONTROL = {"JMP", "JZ", "JNZ", "JLT", "JGE", "JMPR", "CALL", "CALLR", "RET"}


def hand_encode(name, rd, rs, imm):
    return bytes([TABLE[name], rd << 4 | rs, imm & 0xFF, imm >> 8])


def test_table_matches():
    assert {op.name: int(op) for op in Op} == TABLE


def test_nop_bytes():
    assert decode(bytes([1, 0, 0, 0]), 0x400000) == Instruction(Op.NOP, addr=0x400000)
    assert encode(Instruction(Op.NOP)) == bytes([1, 0, 0, 0])


def test_zero_word_is_undefined():
    with pytest.raises(UndefinedOpcode) as e:
        decode(bytes(4))
    assert e.value.opcode == 0


def test_add_r1_r2():
    ins = decode(bytes([0x05, 0x12, 0, 0]))
    assert (ins.op, ins.rd, ins.rs) == (Op.ADD, 1, 2)
    assert encode(Instruction(Op.ADD, 1, 2)) == bytes([0x05, 0x12, 0, 0])


def test_exhaustive_bijection():
    seen = {}
    for name, rd, rs, imm in itertools.product(TABLE, range(8), range(8),
                                               (0, 1, 0x7FFF, 0xFFFF)):
        raw = hand_encode(name, rd, rs, imm)
        ins = decode(raw, 0x1000)
        assert (ins.op.name, ins.rd, ins.rs, ins.imm, ins.addr) == (name, rd, rs, imm, 0x1000)
        assert encode(ins) == raw
        assert raw not in seen
        seen[raw] = ins
    assert len(seen) == len(TABLE) * 64 * 4


def test_every_opcode_byte():
    for b in range(256):
        word = b | 0x12 << 8
        if b in TABLE.values():
            assert encode_word(decode_word(word)) == word
        else:
            with pytest.raises(UndefinedOpcode):
                decode_word(word)


def test_register_high_bit_rejected():
    with pytest.raises(InvalidRegister):
        decode_word(0x05 | 0x80 << 8)


@pytest.mark.parametrize("ins", [Instruction(Op.ADD, 8, 0), Instruction(Op.ADD, 0, -1),
                                 Instruction(Op.ADDI, 0, 0, 0x10000),
                                 Instruction(Op.ADDI, 0, 0, -1)])
def test_field_overflow(ins):
    with pytest.raises(FieldOverflow):
        encode(ins)


def test_unaligned_decode():
    with pytest.raises(ValueError):
        decode(bytes([1, 0, 0, 0]), 2)


def test_classes():
    assert classify(Instruction(Op.ADD)) is OpClass.ALU
    assert classify(Instruction(Op.RET)) is OpClass.CONTROL
    assert classify(Instruction(Op.CALLOUT)) is OpClass.CALLOUT
    assert classify(Instruction(Op.SYS)) is OpClass.SYSCALL
    for name in CONTROL:
        assert classify(Instruction(Op[name])) is OpClass.CONTROL


def test_costs():
    assert cost(Instruction(Op.NOP)) == 1
    assert cost(Instruction(Op.LD)) == 2
    assert cost(Instruction(Op.SYS)) == 10
    assert cost(Instruction(Op.CALLOUT)) == 0
    for op in Op:
        ins = Instruction(op)
        assert cost(ins) == CLASS_COST[classify(ins)]
        assert cost(ins) > 0 or op is Op.CALLOUT


def test_little_endian_word():
    ins = Instruction(Op.LD, 3, 4, 0xFFFC)
    assert struct.unpack("<I", encode(ins))[0] == 0x10 | 3 << 12 | 4 << 8 | 0xFFFC << 16
    assert ins.simm == -4
