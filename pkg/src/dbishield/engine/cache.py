"""Code cache bookkeeping: translated blocks, callout slots and the reverse map."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Any

from ..image import PAGE, PAGE_SHIFT, PERM_RWX
from ..isa import Instruction
from ..vm.memory import AddressSpace

CACHE_BASE = 0xC0000000
CACHE_PAGES = 1024
CORE_BASE = 0xD0000000
CORE_PAGES = 32
CTX_BASE = 0xD1000000
CTX_STRIDE = 0x10000
CTX_PAGES = 16
SPILL_ADDR = 0xDFFFF000
MAX_CALLOUTS = 0x10000
BLOCK_ALIGN = 16
NOP_WORD = 0x00000001


@dataclass(eq=False)
class Callout:
    """One CALLOUT slot emitted into the cache.

    ``kind`` is one of ``pre``, ``post``, ``term``, ``fault`` or ``detour``.
    ``guest`` is the guest address of the instruction the slot stands for.
    """
    kind: str
    guest: int
    cache: int = 0
    instr: Instruction | None = None
    hooks: tuple = ()
    skip_to: int = 0
    target: int = 0
    block: "TranslatedBlock | None" = None
    hits: int = 0
    linked: "TranslatedBlock | None" = None
    data: Any = None
    cid: int = -1


@dataclass(eq=False)
class TranslatedBlock:
    guest_entry: int
    cache_entry: int
    cache_end: int
    guest_end: int
    ninstr: int
    terminal: str
    pages: frozenset[int]
    copies: dict[int, int] = field(default_factory=dict)    # cache -> guest
    stubs: dict[int, int] = field(default_factory=dict)     # cache -> guest
    callouts: list[Callout] = field(default_factory=list)
    incoming: set = field(default_factory=set)               # linked Callouts
    valid: bool = True

    def __repr__(self) -> str:
        return (f"TranslatedBlock(0x{self.guest_entry:08X}->0x{self.cache_entry:08X}, "
                f"{self.ninstr} instrs, {self.terminal})")


class CodeCache:
    """Arena allocator plus the guest->cache and cache->guest maps."""

    def __init__(self, mem: AddressSpace):
        self.mem = mem
        self.cursor = CACHE_BASE
        self.mapped_end = CACHE_BASE
        self.blocks: dict[int, TranslatedBlock] = {}
        self.by_page: dict[int, set[int]] = {}
        self.reverse: dict[int, int] = {}
        self.graveyard: dict[int, int] = {}
        self.vcost: dict[int, int] = {}
        self.callouts: list[Callout | None] = []
        self.spans: list[tuple[int, TranslatedBlock]] = []

    # -- arena -------------------------------------------------------------
    def room_for(self, nwords: int) -> bool:
        end = self.cursor + 4 * nwords + BLOCK_ALIGN
        return (end <= CACHE_BASE + CACHE_PAGES * PAGE
                and len(self.callouts) + nwords < MAX_CALLOUTS)

    def emit(self, words: list[int]) -> int:
        start = self.cursor
        end = start + 4 * len(words)
        end = (end + BLOCK_ALIGN - 1) & -BLOCK_ALIGN
        words = words + [NOP_WORD] * ((end - start) // 4 - len(words))
        while self.mapped_end < end:
            self.mem.map(self.mapped_end >> PAGE_SHIFT, 1, PERM_RWX, engine=True)
            self.mapped_end += PAGE
        self.mem.poke(start, b"".join(w.to_bytes(4, "little") for w in words))
        self.cursor = end
        return start

    @property
    def pages_used(self) -> int:
        return (self.mapped_end - CACHE_BASE) // PAGE

    def new_callout(self, c: Callout) -> int:
        c.cid = len(self.callouts)
        self.callouts.append(c)
        return c.cid

    # -- maps --------------------------------------------------------------
    def insert(self, b: TranslatedBlock) -> None:
        self.blocks[b.guest_entry] = b
        for idx in b.pages:
            self.by_page.setdefault(idx, set()).add(b.guest_entry)
        self.reverse.update(b.copies)
        self.reverse.update(b.stubs)
        self.spans.append((b.cache_entry, b))

    def drop(self, b: TranslatedBlock) -> None:
        b.valid = False
        if self.blocks.get(b.guest_entry) is b:
            del self.blocks[b.guest_entry]
        for idx in b.pages:
            owners = self.by_page.get(idx)
            if owners is not None:
                owners.discard(b.guest_entry)
                if not owners:
                    del self.by_page[idx]
        for addr in (*b.copies, *b.stubs):
            g = self.reverse.pop(addr, None)
            if g is not None:
                self.graveyard[addr] = g

    def reverse_lookup(self, addr: int) -> int:
        """Map a cache address to the guest address it stands for.

        Addresses outside the cache region are returned unchanged; padding
        inside a block maps to the block's guest entry.
        """
        g = self.reverse.get(addr)
        if g is not None:
            return g
        g = self.graveyard.get(addr)
        if g is not None:
            return g
        if not CACHE_BASE <= addr < self.cursor:
            return addr
        i = bisect_right(self.spans, addr, key=lambda s: s[0]) - 1
        if i >= 0:
            b = self.spans[i][1]
            if addr < b.cache_end:
                return b.guest_entry
        return addr

    def reset(self) -> None:
        """Discard every block; the arena pages stay mapped and are reused."""
        for b in list(self.blocks.values()):
            b.valid = False
        self.blocks.clear()
        self.by_page.clear()
        self.reverse.clear()
        self.graveyard.clear()
        self.vcost.clear()
        self.callouts.clear()
        self.spans.clear()
        self.cursor = CACHE_BASE
