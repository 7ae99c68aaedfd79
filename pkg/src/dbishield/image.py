"""Guest program images and the GIMG container format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

PAGE = 4096
PAGE_SHIFT = 12

PERM_R, PERM_W, PERM_X = 1, 2, 4
PERM_RW = PERM_R | PERM_W
PERM_RX = PERM_R | PERM_X
PERM_RWX = PERM_R | PERM_W | PERM_X

ARENA_BASE, ARENA_END = 0xC0000000, 0xE0000000
FRAMES_BASE, FRAMES_END = 0x7F000000, 0x7F100000

CODE_BASE = 0x00400000
DATA_BASE = 0x00600000
LIB_BASE = 0x00700000

MAGIC = b"GIMG"
VERSION = 1

_U32 = struct.Struct("<I")
_SEG = struct.Struct("<5I")


class ImageError(Exception):
    pass


class BadMagic(ImageError):
    pass


class TruncatedFile(ImageError):
    pass


class InvariantViolation(ImageError):
    pass


def page_round(n: int) -> int:
    return (n + PAGE - 1) & ~(PAGE - 1)


@dataclass
class Segment:
    vaddr: int
    perms: int
    data: bytes
    memlen: int = -1

    def __post_init__(self) -> None:
        if self.memlen < 0:
            self.memlen = len(self.data)

    @property
    def end(self) -> int:
        """First byte past the page-rounded extent."""
        return self.vaddr + page_round(max(self.memlen, 1))

    def contains(self, addr: int) -> bool:
        return self.vaddr <= addr < self.vaddr + max(self.memlen, len(self.data))


@dataclass
class Image:
    entry: int
    segments: list[Segment] = field(default_factory=list)
    args: bytes = b""
    env: list[bytes] = field(default_factory=list)

    def validate(self) -> None:
        spans = []
        for seg in self.segments:
            if seg.vaddr % PAGE:
                raise InvariantViolation(f"segment 0x{seg.vaddr:08X} not page-aligned")
            if seg.memlen < len(seg.data):
                raise InvariantViolation("segment memlen shorter than its data")
            if seg.perms & ~PERM_RWX:
                raise InvariantViolation(f"bad permission mask {seg.perms}")
            lo, hi = seg.vaddr, seg.end
            if hi > 1 << 32:
                raise InvariantViolation("segment exceeds the 32-bit address space")
            for rlo, rhi, name in ((ARENA_BASE, ARENA_END, "engine arena"),
                                   (FRAMES_BASE, FRAMES_END, "thread-frame region")):
                if lo < rhi and rlo < hi:
                    raise InvariantViolation(
                        f"segment 0x{lo:08X} intersects the {name}")
            spans.append((lo, hi))
        spans.sort()
        for (_, a_hi), (b_lo, _) in zip(spans, spans[1:]):
            if b_lo < a_hi:
                raise InvariantViolation(f"segments overlap at 0x{b_lo:08X}")
        seg = self.segment_at(self.entry)
        if seg is None or not seg.perms & PERM_X:
            raise InvariantViolation(f"entry 0x{self.entry:08X} not in an executable segment")

    def segment_at(self, addr: int) -> Segment | None:
        for seg in self.segments:
            if seg.contains(addr):
                return seg
        return None

    def code_ranges(self) -> list[tuple[int, int]]:
        return [(s.vaddr, s.vaddr + s.memlen) for s in self.segments if s.perms & PERM_X]


def write_image(img: Image) -> bytes:
    img.validate()
    head = bytearray(MAGIC)
    head += struct.pack("<3I", VERSION, img.entry, len(img.segments))
    tail = bytearray(_U32.pack(len(img.args)) + img.args)
    tail += _U32.pack(len(img.env))
    for entry in img.env:
        tail += _U32.pack(len(entry)) + entry
    offset = len(head) + _SEG.size * len(img.segments) + len(tail)
    table = bytearray()
    blobs = bytearray()
    for seg in img.segments:
        table += _SEG.pack(seg.vaddr, len(seg.data), seg.memlen, seg.perms,
                           offset + len(blobs))
        blobs += seg.data
    return bytes(head + table + tail + blobs)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load_image(buf: bytes) -> Image:
    buf = bytes(buf)
    if len(buf) < 4:
        raise TruncatedFile("file shorter than magic")
    if buf[:4] != MAGIC:
        raise BadMagic(repr(buf[:4]))
    rd = _Reader(buf)
    rd.pos = 4
    version = rd.u32()
    if version != VERSION:
        raise ImageError(f"unsupported GIMG version {version}")
    entry, nsegs = rd.u32(), rd.u32()
    rows = [_SEG.unpack(rd.take(_SEG.size)) for _ in range(nsegs)]
    args = rd.take(rd.u32())
    env = [rd.take(rd.u32()) for _ in range(rd.u32())]
    segments = []
    for vaddr, filelen, memlen, perms, off in rows:
        if off + filelen > len(buf):
            raise TruncatedFile(f"segment 0x{vaddr:08X} data past end of file")
        segments.append(Segment(vaddr, perms, buf[off:off + filelen], memlen))
    img = Image(entry, segments, args, env)
    img.validate()
    return img
