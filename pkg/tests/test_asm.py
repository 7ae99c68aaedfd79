import struct

import pytest

from dbishield import corpus
from dbishield.asm import (AlignmentError, AsmSyntaxError, BranchOutOfRange, MissingEntry,
                           OverlapError, UndefinedLabel, assemble, assemble_with_symbols)
from dbishield.image import PERM_RW, PERM_RX
from dbishield.isa import Op, decode_word, encode_word
from dbishield.vm.reference import run_reference

CLEAN = """
        .seg code
        .entry main
main:   MOVri R0, 2
        MOVri R1, lo(msg)
        MOVHI R1, hi(msg)
        MOVri R2, 6
        SYS
        MOVri R0, 1
        MOVri R1, 0
        SYS
        .seg data
msg:    .ascii "CLEAN\\n"
"""


def test_smallest_program():
    img = assemble(CLEAN)
    assert [(s.vaddr, s.perms) for s in img.segments] == [(0x400000, PERM_RX),
                                                           (0x600000, PERM_RW)]
    assert img.entry == 0x400000
    tr = run_reference(img)
    assert (tr.output, tr.exit_code) == (b"CLEAN\n", 0)


def test_deterministic():
    assert assemble(CLEAN) == assemble(CLEAN)


def test_branch_displacement():
    img = assemble(".seg code\n.entry a\na: NOP\nJMP a\nJZ c\nNOP\nc: RET\n")
    code = img.segments[0].data
    w = [struct.unpack_from("<I", code, i)[0] for i in range(0, len(code), 4)]
    assert decode_word(w[1]).simm == (0x400000 - 0x400008) // 4
    assert decode_word(w[2]).simm == (0x400010 - 0x40000C) // 4


def test_li_and_callf():
    asm = assemble_with_symbols(".seg code\n.entry a\na: LI R3, 0x12345678\nCALLF f\n"
                                ".seg lib\nf: RET\n")
    code = asm.image.segments[0].data
    ops = [decode_word(struct.unpack_from("<I", code, i)[0]) for i in range(0, 20, 4)]
    assert [i.op for i in ops] == [Op.MOVri, Op.MOVHI, Op.MOVri, Op.MOVHI, Op.CALLR]
    assert (ops[0].imm, ops[1].imm) == (0x5678, 0x1234)
    assert asm.symbols["f"] == 0x700000


@pytest.mark.parametrize("src,exc", [
    (".seg code\nNOP\n", MissingEntry),
    (".seg code\n.entry a\na: JMP nowhere\n", UndefinedLabel),
    (".seg code\n.entry a\na: JMP b\n.space 0x20000\nb: NOP\n", BranchOutOfRange),
    (".seg code\n.entry a\na: NOP\n.seg data @0x400000\n.word 1\n", OverlapError),
    (".seg code\n.entry a\na: NOP\n.byte 1\nNOP\n", AlignmentError),
    (".seg code\n.entry a\na: FROB R1\n", AsmSyntaxError),
    (".seg code\n.entry a\na: NOP\na: NOP\n", AsmSyntaxError),
])
def test_errors(src, exc):
    with pytest.raises(exc):
        assemble(src)


@pytest.mark.parametrize("name", corpus.names())
def test_corpus_assembles_and_disassembles(name):
    img = corpus.load(name)
    code = next(s for s in img.segments if s.vaddr == 0x400000)
    for i in range(0, len(code.data), 4):
        w = struct.unpack_from("<I", code.data, i)[0]
        if w == 0 or w & 0xFF == 0xFF:
            continue    # padding and deliberately illegal words
        assert encode_word(decode_word(w)) == w
