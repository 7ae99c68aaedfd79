"""Paged guest address space with permissions, guard pages and engine pages."""

from __future__ import annotations

from bisect import bisect_left, bisect_right

from ..image import PAGE, PAGE_SHIFT, PERM_R, PERM_W, PERM_X

NPAGES = 1 << (32 - PAGE_SHIFT)

FAULT_READ = 1
FAULT_WRITE = 2
FAULT_EXEC_NX = 3
FAULT_EXEC_UNMAPPED = 4
GUARD_HIT = 5
ILLEGAL_OPCODE = 6
DIV_ZERO = 7
RAISED = 8

FAULT_NAMES = {
    FAULT_READ: "FAULT_READ", FAULT_WRITE: "FAULT_WRITE",
    FAULT_EXEC_NX: "FAULT_EXEC_NX", FAULT_EXEC_UNMAPPED: "FAULT_EXEC_UNMAPPED",
    GUARD_HIT: "GUARD_HIT", ILLEGAL_OPCODE: "ILLEGAL_OPCODE",
    DIV_ZERO: "DIV_ZERO", RAISED: "RAISED",
}


class MemFault(Exception):
    """Raised by the checked access paths; converted to an ExceptionRecord."""

    def __init__(self, code: int, addr: int):
        super().__init__(f"{FAULT_NAMES.get(code, code)} at 0x{addr:08X}")
        self.code = code
        self.addr = addr


class MapConflict(Exception):
    pass


class Page:
    __slots__ = ("perms", "guard", "code", "engine", "data")

    def __init__(self, perms: int, engine: bool = False):
        self.perms = perms
        self.guard = False
        self.code = False
        self.engine = engine
        self.data: bytearray | None = None

    def buf(self) -> bytearray:
        if self.data is None:
            self.data = bytearray(PAGE)
        return self.data


class AddressSpace:
    def __init__(self) -> None:
        self.pages: dict[int, Page] = {}
        self.peak = 0
        self.guest_committed = 0
        self.guest_peak = 0
        self.hide_engine = False
        self.on_code_write = None
        self._sorted: list[int] | None = None

    # -- accounting ------------------------------------------------------
    @property
    def committed(self) -> int:
        return len(self.pages)

    @property
    def engine_pages(self) -> int:
        return len(self.pages) - self.guest_committed

    def map(self, first: int, count: int, perms: int, engine: bool = False) -> None:
        pages = self.pages
        for idx in range(first, first + count):
            if idx in pages or not 0 <= idx < NPAGES:
                raise MapConflict(f"page 0x{idx << PAGE_SHIFT:08X} already mapped")
        for idx in range(first, first + count):
            pages[idx] = Page(perms, engine)
        if not engine:
            self.guest_committed += count
            self.guest_peak = max(self.guest_peak, self.guest_committed)
        self.peak = max(self.peak, len(pages))
        self._sorted = None

    def unmap(self, first: int, count: int) -> None:
        for idx in range(first, first + count):
            page = self.pages.pop(idx, None)
            if page is not None and not page.engine:
                self.guest_committed -= 1
        self._sorted = None

    def is_free(self, first: int, count: int) -> bool:
        pages = self.pages
        return all(idx not in pages for idx in range(first, first + count))

    # -- checked guest access -------------------------------------------
    def _page(self, addr: int, need: int, code: int) -> Page:
        page = self.pages.get(addr >> PAGE_SHIFT)
        if page is None or (page.engine and self.hide_engine):
            raise MemFault(code, addr)
        if page.guard:
            page.guard = False
            raise MemFault(5, addr)
        if not page.perms & need:
            raise MemFault(code, addr)
        return page

    def fetch(self, pc: int) -> int:
        page = self.pages.get(pc >> PAGE_SHIFT)
        if page is None or pc & 3:
            raise MemFault(FAULT_EXEC_UNMAPPED, pc)
        if page.guard:
            page.guard = False
            raise MemFault(GUARD_HIT, pc)
        if not page.perms & PERM_X:
            raise MemFault(FAULT_EXEC_NX, pc)
        data = page.data
        if data is None:
            return 0
        off = pc & 0xFFF
        return data[off] | data[off + 1] << 8 | data[off + 2] << 16 | data[off + 3] << 24

    def read8(self, addr: int) -> int:
        data = self._page(addr, PERM_R, FAULT_READ).data
        return 0 if data is None else data[addr & 0xFFF]

    def read32(self, addr: int) -> int:
        off = addr & 0xFFF
        if off > PAGE - 4:
            return (self.read8(addr) | self.read8((addr + 1) & 0xFFFFFFFF) << 8
                    | self.read8((addr + 2) & 0xFFFFFFFF) << 16
                    | self.read8((addr + 3) & 0xFFFFFFFF) << 24)
        data = self._page(addr, PERM_R, FAULT_READ).data
        if data is None:
            return 0
        return data[off] | data[off + 1] << 8 | data[off + 2] << 16 | data[off + 3] << 24

    def write8(self, addr: int, value: int) -> None:
        page = self._page(addr, PERM_W, FAULT_WRITE)
        page.buf()[addr & 0xFFF] = value & 0xFF
        if page.code and self.on_code_write is not None:
            self.on_code_write(addr >> PAGE_SHIFT)

    def write32(self, addr: int, value: int) -> None:
        off = addr & 0xFFF
        if off > PAGE - 4:
            # Validate every byte before the first write so a fault leaves no trace.
            for i in range(4):
                self._check_write((addr + i) & 0xFFFFFFFF)
            for i in range(4):
                self.write8((addr + i) & 0xFFFFFFFF, value >> (8 * i))
            return
        page = self._page(addr, PERM_W, FAULT_WRITE)
        page.buf()[off:off + 4] = (value & 0xFFFFFFFF).to_bytes(4, "little")
        if page.code and self.on_code_write is not None:
            self.on_code_write(addr >> PAGE_SHIFT)

    def _check_write(self, addr: int) -> None:
        page = self.pages.get(addr >> PAGE_SHIFT)
        if page is None or (page.engine and self.hide_engine):
            raise MemFault(FAULT_WRITE, addr)
        if page.guard:
            page.guard = False
            raise MemFault(GUARD_HIT, addr)
        if not page.perms & PERM_W:
            raise MemFault(FAULT_WRITE, addr)

    # -- syscall-level copies (permission-checked, guards untouched) -------
    def _visible(self, idx: int) -> Page | None:
        page = self.pages.get(idx)
        if page is None or (page.engine and self.hide_engine):
            return None
        return page

    def copy_out(self, addr: int, n: int) -> bytes | None:
        out = bytearray()
        while n > 0:
            page = self._visible(addr >> PAGE_SHIFT)
            if page is None or not page.perms & PERM_R:
                return None
            off = addr & 0xFFF
            take = min(n, PAGE - off)
            out += page.data[off:off + take] if page.data is not None else bytes(take)
            addr, n = (addr + take) & 0xFFFFFFFF, n - take
        return bytes(out)

    def copy_in(self, addr: int, data: bytes) -> bool:
        pos, a = 0, addr
        while pos < len(data):
            page = self._visible(a >> PAGE_SHIFT)
            if page is None or not page.perms & PERM_W:
                return False
            take = min(len(data) - pos, PAGE - (a & 0xFFF))
            a, pos = (a + take) & 0xFFFFFFFF, pos + take
        pos, a = 0, addr
        while pos < len(data):
            page = self.pages[a >> PAGE_SHIFT]
            off = a & 0xFFF
            take = min(len(data) - pos, PAGE - off)
            page.buf()[off:off + take] = data[pos:pos + take]
            if page.code and self.on_code_write is not None:
                self.on_code_write(a >> PAGE_SHIFT)
            a, pos = (a + take) & 0xFFFFFFFF, pos + take
        return True

    # -- engine inspection path (no permissions, no guards) ---------------
    def peek(self, addr: int, n: int) -> bytes | None:
        out = bytearray()
        while n > 0:
            page = self.pages.get(addr >> PAGE_SHIFT)
            if page is None:
                return None
            off = addr & 0xFFF
            take = min(n, PAGE - off)
            out += page.data[off:off + take] if page.data is not None else bytes(take)
            addr, n = addr + take, n - take
        return bytes(out)

    def peek32(self, addr: int) -> int | None:
        raw = self.peek(addr, 4)
        return None if raw is None else int.from_bytes(raw, "little")

    def poke(self, addr: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            page = self.pages[addr >> PAGE_SHIFT]
            off = addr & 0xFFF
            take = min(len(data) - pos, PAGE - off)
            page.buf()[off:off + take] = data[pos:pos + take]
            addr, pos = addr + take, pos + take

    # -- region queries ----------------------------------------------------
    def _visible_sorted(self, hide_engine: bool) -> list[int]:
        if self._sorted is None:
            self._sorted = sorted(self.pages)
        if not hide_engine:
            return self._sorted
        return [i for i in self._sorted if not self.pages[i].engine]

    def region(self, addr: int, hide_engine: bool = False,
               perms_of=None) -> tuple[bool, int, int, int]:
        """Return (mapped, perms, base, size) of the region holding ``addr``.

        Mapped regions are maximal runs of contiguous pages with equal
        reported permissions; free regions are maximal unmapped runs.
        """
        perms_of = perms_of or (lambda p: p.perms)
        idx = (addr & 0xFFFFFFFF) >> PAGE_SHIFT
        keys = self._visible_sorted(hide_engine)
        pages = self.pages
        page = pages.get(idx)
        if page is None or (hide_engine and page.engine):
            lo = bisect_left(keys, idx)
            start = keys[lo - 1] + 1 if lo > 0 else 0
            hi = bisect_right(keys, idx)
            end = keys[hi] if hi < len(keys) else NPAGES
            return False, 0, start << PAGE_SHIFT, (end - start) << PAGE_SHIFT
        perms = perms_of(page)

        def same(i: int) -> bool:
            p = pages.get(i)
            return p is not None and not (hide_engine and p.engine) and perms_of(p) == perms

        start = idx
        while start > 0 and same(start - 1):
            start -= 1
        end = idx + 1
        while end < NPAGES and same(end):
            end += 1
        return True, perms, start << PAGE_SHIFT, (end - start) << PAGE_SHIFT
