"""Two-pass assembler for G32 assembly text.

Syntax, one statement per line::

    label:  MNEMONIC operands      ; comment
            .directive args

Operand expressions accept integers (decimal, 0x, 0b, 'c'), labels, ``+``/``-``
chains and the ``lo(expr)`` / ``hi(expr)`` halves.  ``LI rd, expr`` is a
two-word pseudo-instruction (MOVri + MOVHI); ``CALLF target`` is a far call
through R0 (``LI R0, target`` + ``CALLR R0``).
"""

from __future__ import annotations

import codecs
import re
from dataclasses import dataclass, field

from .image import (CODE_BASE, DATA_BASE, LIB_BASE, PAGE, PERM_R, PERM_RW,
                    PERM_RX, PERM_W, PERM_X, Image, ImageError, Segment)
from .isa import BY_MNEMONIC, FieldOverflow, Instruction, Op, encode

__all__ = [
    "AsmError", "AsmSyntaxError", "UndefinedLabel", "BranchOutOfRange",
    "OverlapError", "AlignmentError", "MissingEntry", "assemble",
    "assemble_with_symbols", "Assembly",
]


class AsmError(Exception):
    def __init__(self, msg: str, origin: str = "", line: int = 0):
        where = f"{origin}:{line}: " if line else (f"{origin}: " if origin else "")
        super().__init__(where + msg)
        self.line = line


class AsmSyntaxError(AsmError):
    pass


class UndefinedLabel(AsmError):
    pass


class BranchOutOfRange(AsmError):
    pass


class OverlapError(AsmError):
    pass


class AlignmentError(AsmError):
    pass


class MissingEntry(AsmError):
    pass


SEG_DEFAULTS = {"code": (CODE_BASE, PERM_RX), "data": (DATA_BASE, PERM_RW),
                "lib": (LIB_BASE, PERM_RX)}

PSEUDO_SIZE = {"LI": 8, "CALLF": 12}

FMT_NONE = {Op.NOP, Op.RET, Op.SYS}
FMT_RI = {Op.MOVri, Op.MOVHI, Op.SHL, Op.SHR, Op.ADDI, Op.CMPI}
FMT_RR = {Op.MOVrr, Op.ADD, Op.SUB, Op.MUL, Op.DIV, Op.AND, Op.OR, Op.XOR, Op.CMP}
FMT_LOAD = {Op.LD, Op.LDB}
FMT_STORE = {Op.ST, Op.STB}
FMT_BRANCH = {Op.JMP, Op.JZ, Op.JNZ, Op.JLT, Op.JGE, Op.CALL}
FMT_RS = {Op.JMPR, Op.CALLR, Op.PUSH}
FMT_RD = {Op.POP, Op.RDLIP}

_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*)\s*:")
_IDENT_RE = re.compile(r"[A-Za-z_.$][\w.$]*$")
_REG_RE = re.compile(r"^(?:R([0-7])|SP)$", re.I)
_MEM_RE = re.compile(r"^\[\s*(R[0-7]|SP)\s*(?:([+-])\s*(.+?))?\s*\]$", re.I)


@dataclass
class _Stmt:
    line: int
    kind: str            # "ins" | "dir"
    name: str
    operands: list[str]
    seg: int = -1
    addr: int = 0
    size: int = 0


@dataclass
class _Seg:
    kind: str
    vaddr: int
    perms: int
    cursor: int = 0
    data: bytearray = field(default_factory=bytearray)


@dataclass
class Assembly:
    image: Image
    symbols: dict[str, int]


def _split_operands(text: str) -> list[str]:
    out, depth, cur, quote = [], 0, [], None
    for ch in text:
        if quote:
            cur.append(ch)
            if ch == quote and (len(cur) < 2 or cur[-2] != "\\"):
                quote = None
            continue
        if ch in "\"'":
            quote = ch
        elif ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        elif ch == "," and depth == 0:
            out.append("".join(cur).strip())
            cur = []
            continue
        cur.append(ch)
    tail = "".join(cur).strip()
    if tail or out:
        out.append(tail)
    return out


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote and line[i - 1] != "\\":
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == ";":
            return line[:i]
    return line


def _unquote(tok: str) -> bytes:
    tok = tok.strip()
    if len(tok) < 2 or tok[0] != '"' or tok[-1] != '"':
        raise ValueError(f"expected a quoted string, got {tok!r}")
    return codecs.decode(tok[1:-1], "unicode_escape").encode("latin-1")


class _Assembler:
    def __init__(self, text: str, origin: str):
        self.text = text
        self.origin = origin
        self.labels: dict[str, int] = {}
        self.segs: list[_Seg] = []
        self.stmts: list[_Stmt] = []
        self.entry_label: str | None = None
        self.entry_line = 0
        self.args = b""
        self.env: list[bytes] = []

    def err(self, cls: type[AsmError], msg: str, line: int = 0) -> AsmError:
        return cls(msg, self.origin, line)

    # -- expressions -----------------------------------------------------
    def eval(self, expr: str, line: int, resolve: bool = True) -> int:
        expr = expr.strip()
        if not expr:
            raise self.err(AsmSyntaxError, "empty expression", line)
        terms = re.split(r"(?<=[^\s(+-])\s*([+-])\s*", expr)
        if terms[0] == "":
            terms = terms[1:]
        total, sign = 0, 1
        if terms and terms[0] in "+-" and len(terms[0]) == 1 and len(terms) > 1:
            sign = -1 if terms[0] == "-" else 1
            terms = terms[1:]
        for i, term in enumerate(terms):
            if i % 2 == 1:
                sign = -1 if term == "-" else 1
                continue
            total += sign * self._term(term.strip(), line, resolve)
        return total

    def _term(self, t: str, line: int, resolve: bool) -> int:
        m = re.fullmatch(r"(lo|hi)\((.*)\)", t, re.I)
        if m:
            v = self.eval(m.group(2), line, resolve) & 0xFFFFFFFF
            return v & 0xFFFF if m.group(1).lower() == "lo" else v >> 16
        if t.startswith("-"):
            return -self._term(t[1:].strip(), line, resolve)
        if len(t) >= 3 and t[0] == t[-1] == "'":
            ch = codecs.decode(t[1:-1], "unicode_escape").encode("latin-1")
            if len(ch) != 1:
                raise self.err(AsmSyntaxError, f"bad character literal {t}", line)
            return ch[0]
        if t[:1].isdigit():
            try:
                return int(t, 0)
            except ValueError:
                raise self.err(AsmSyntaxError, f"bad number {t!r}", line) from None
        if _IDENT_RE.match(t):
            if not resolve:
                return 0
            if t not in self.labels:
                raise self.err(UndefinedLabel, f"undefined label {t!r}", line)
            return self.labels[t]
        raise self.err(AsmSyntaxError, f"cannot parse operand {t!r}", line)

    def reg(self, tok: str, line: int) -> int:
        m = _REG_RE.match(tok.strip())
        if not m:
            raise self.err(AsmSyntaxError, f"expected a register, got {tok!r}", line)
        return int(m.group(1)) if m.group(1) is not None else 7

    def mem(self, tok: str, line: int) -> tuple[int, int]:
        m = _MEM_RE.match(tok.strip())
        if not m:
            raise self.err(AsmSyntaxError, f"expected [Rn+off], got {tok!r}", line)
        base = self.reg(m.group(1), line)
        off = 0
        if m.group(3):
            off = self.eval(m.group(3), line)
            if m.group(2) == "-":
                off = -off
        return base, off

    # -- pass 1 ----------------------------------------------------------
    def parse(self) -> None:
        cur: _Seg | None = None
        for lineno, raw in enumerate(self.text.splitlines(), 1):
            line = _strip_comment(raw).strip()
            while True:
                m = _LABEL_RE.match(line)
                if not m:
                    break
                name = m.group(1)
                if name in self.labels:
                    raise self.err(AsmSyntaxError, f"duplicate label {name!r}", lineno)
                if cur is None:
                    raise self.err(AsmSyntaxError, "label outside any .seg", lineno)
                self.labels[name] = cur.vaddr + cur.cursor
                line = line[m.end():].strip()
            if not line:
                continue
            head, *tail = line.split(None, 1)
            rest = tail[0].strip() if tail else ""
            if head.startswith("."):
                cur = self.directive(head.lower(), rest, lineno, cur)
                continue
            name = head.upper()
            if cur is None:
                raise self.err(AsmSyntaxError, "instruction outside any .seg", lineno)
            if name not in PSEUDO_SIZE and name not in BY_MNEMONIC:
                raise self.err(AsmSyntaxError, f"unknown mnemonic {head!r}", lineno)
            if cur.cursor % 4:
                raise self.err(AlignmentError, "instruction not 4-byte aligned", lineno)
            size = PSEUDO_SIZE.get(name, 4)
            st = _Stmt(lineno, "ins", name, _split_operands(rest),
                       self.segs.index(cur), cur.vaddr + cur.cursor, size)
            cur.cursor += size
            self.stmts.append(st)

    def directive(self, name: str, rest: str, line: int, cur: _Seg | None) -> _Seg | None:
        ops = _split_operands(rest)
        if name == ".seg":
            parts = rest.split()
            if not parts or parts[0] not in SEG_DEFAULTS:
                raise self.err(AsmSyntaxError, ".seg expects code|data|lib", line)
            vaddr, perms = SEG_DEFAULTS[parts[0]]
            for p in parts[1:]:
                if p.startswith("@"):
                    vaddr = self.eval(p[1:], line, resolve=False)
                elif re.fullmatch(r"[rwx-]+", p):
                    perms = ((PERM_R if "r" in p else 0) | (PERM_W if "w" in p else 0)
                             | (PERM_X if "x" in p else 0))
                else:
                    raise self.err(AsmSyntaxError, f"bad .seg argument {p!r}", line)
            if vaddr % PAGE:
                raise self.err(AlignmentError, f".seg address 0x{vaddr:X} not page-aligned", line)
            seg = _Seg(parts[0], vaddr, perms)
            self.segs.append(seg)
            return seg
        if name == ".entry":
            self.entry_label, self.entry_line = rest.strip(), line
            return cur
        if name == ".args":
            self.args = _unquote(rest)
            return cur
        if name == ".env":
            if "=" not in rest:
                raise self.err(AsmSyntaxError, ".env expects NAME=VALUE", line)
            self.env.append(rest.strip().encode("latin-1"))
            return cur
        if cur is None:
            raise self.err(AsmSyntaxError, f"{name} outside any .seg", line)
        if name == ".word":
            size = 4 * len(ops)
            if cur.cursor % 4:
                raise self.err(AlignmentError, ".word not 4-byte aligned", line)
        elif name == ".byte":
            size = len(ops)
        elif name in (".ascii", ".asciz"):
            try:
                size = len(_unquote(rest)) + (name == ".asciz")
            except ValueError as exc:
                raise self.err(AsmSyntaxError, str(exc), line) from None
        elif name == ".align":
            n = self.eval(rest, line, resolve=False)
            if n <= 0 or n & (n - 1):
                raise self.err(AlignmentError, ".align expects a power of two", line)
            size = (-cur.cursor) % n
        elif name == ".space":
            size = self.eval(rest, line, resolve=False)
        else:
            raise self.err(AsmSyntaxError, f"unknown directive {name}", line)
        self.stmts.append(_Stmt(line, "dir", name, ops if name != ".ascii" and name != ".asciz"
                                else [rest], self.segs.index(cur), cur.vaddr + cur.cursor, size))
        cur.cursor += size
        return cur

    # -- pass 2 ----------------------------------------------------------
    def emit(self) -> Assembly:
        for st in self.stmts:
            seg = self.segs[st.seg]
            chunk = self.encode_dir(st) if st.kind == "dir" else self.encode_ins(st)
            assert len(chunk) == st.size
            seg.data += chunk
        if not self.entry_label:
            raise self.err(MissingEntry, "missing .entry")
        entry = self.eval(self.entry_label, self.entry_line)
        segments = [Segment(s.vaddr, s.perms, bytes(s.data)) for s in self.segs if s.data]
        spans = sorted((s.vaddr, s.end) for s in segments)
        for (_, a_hi), (b_lo, _) in zip(spans, spans[1:]):
            if b_lo < a_hi:
                raise self.err(OverlapError, f"segments overlap at 0x{b_lo:08X}")
        img = Image(entry, segments, self.args, self.env)
        try:
            img.validate()
        except ImageError as exc:
            raise self.err(OverlapError if "overlap" in str(exc) or "intersects" in str(exc)
                           else AsmError, str(exc)) from None
        return Assembly(img, dict(self.labels))

    def encode_dir(self, st: _Stmt) -> bytes:
        if st.name == ".word":
            return b"".join((self.eval(o, st.line) & 0xFFFFFFFF).to_bytes(4, "little")
                            for o in st.operands)
        if st.name == ".byte":
            return bytes(self.eval(o, st.line) & 0xFF for o in st.operands)
        if st.name in (".ascii", ".asciz"):
            return _unquote(st.operands[0]) + (b"\0" if st.name == ".asciz" else b"")
        return bytes(st.size)

    def imm(self, expr: str, line: int) -> int:
        v = self.eval(expr, line)
        if not -0x8000 <= v <= 0xFFFF:
            raise self.err(AsmError, f"immediate {v} does not fit in 16 bits", line)
        return v & 0xFFFF

    def encode_ins(self, st: _Stmt) -> bytes:
        ops, line, pc = st.operands, st.line, st.addr

        def want(n: int) -> None:
            if len(ops) != n:
                raise self.err(AsmSyntaxError, f"{st.name} takes {n} operand(s)", line)

        if st.name == "LI":
            want(2)
            rd = self.reg(ops[0], line)
            v = self.eval(ops[1], line) & 0xFFFFFFFF
            return (encode(Instruction(Op.MOVri, rd, 0, v & 0xFFFF))
                    + encode(Instruction(Op.MOVHI, rd, 0, v >> 16)))
        if st.name == "CALLF":
            want(1)
            v = self.eval(ops[0], line) & 0xFFFFFFFF
            return (encode(Instruction(Op.MOVri, 0, 0, v & 0xFFFF))
                    + encode(Instruction(Op.MOVHI, 0, 0, v >> 16))
                    + encode(Instruction(Op.CALLR, 0, 0, 0)))
        op = BY_MNEMONIC[st.name]
        rd = rs = imm = 0
        if op in FMT_NONE:
            want(0)
        elif op in FMT_RI:
            want(2)
            rd, imm = self.reg(ops[0], line), self.imm(ops[1], line)
        elif op in FMT_RR:
            want(2)
            rd, rs = self.reg(ops[0], line), self.reg(ops[1], line)
        elif op in FMT_LOAD:
            want(2)
            rd = self.reg(ops[0], line)
            rs, off = self.mem(ops[1], line)
            imm = self.imm(str(off), line)
        elif op in FMT_STORE:
            want(2)
            rd, off = self.mem(ops[0], line)
            rs = self.reg(ops[1], line)
            imm = self.imm(str(off), line)
        elif op in FMT_BRANCH:
            want(1)
            target = self.eval(ops[0], line)
            delta = target - (pc + 4)
            if delta % 4:
                raise self.err(AlignmentError, "branch target not 4-byte aligned", line)
            disp = delta // 4
            if not -32768 <= disp <= 32767:
                raise self.err(BranchOutOfRange, f"branch displacement {disp} out of range", line)
            imm = disp & 0xFFFF
        elif op in FMT_RS:
            want(1)
            rs = self.reg(ops[0], line)
        elif op in FMT_RD:
            want(1)
            rd = self.reg(ops[0], line)
        elif op is Op.CALLOUT:
            want(1)
            imm = self.imm(ops[0], line)
        try:
            return encode(Instruction(op, rd, rs, imm, pc))
        except FieldOverflow as exc:
            raise self.err(AsmError, str(exc), line) from None


def assemble_with_symbols(text: str, origin: str = "<asm>") -> Assembly:
    asm = _Assembler(text, origin)
    asm.parse()
    return asm.emit()


def assemble(text: str, origin: str = "<asm>") -> Image:
    return assemble_with_symbols(text, origin).image
