"""Guest machine: threads, the reference interpreter, syscalls and exceptions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, TextIO

from ..image import (FRAMES_BASE, PAGE, PAGE_SHIFT, PERM_RW, PERM_RWX, Image,
                     page_round)
from ..isa import OPCODE_COST, OPCODE_VALID, Op
from ..kernel import alu as _alu
from ..kernel import flags_add as _flags_add
from ..kernel import flags_sub as _flags_sub
from .memory import (DIV_ZERO, FAULT_NAMES, ILLEGAL_OPCODE, AddressSpace,
                     MemFault)

M32 = 0xFFFFFFFF
FLAG_Z, FLAG_N, FLAG_C, FLAG_V = 1, 2, 4, 8

CONTINUE, FAULTED, EXITED, YIELDED, BLOCKED = range(5)

STACK_TOP = 0x7FF00000
STACK_PAGES = 16
MAX_THREADS = 16
TLS_SLOTS = 16
FRAME_WORDS = 15
FRAME_OFF_PC = 8
ALLOC_BASE, ALLOC_END = 0x10000000, 0x7F000000

HANDLE_FILE, HANDLE_EVENT, HANDLE_SECTION, HANDLE_PROCESS, HANDLE_LOG = 1, 2, 3, 4, 5

SYS_NAMES = {
    1: "EXIT", 2: "WRITE", 3: "TIME", 4: "ALLOC", 5: "FREE", 6: "PROTECT",
    7: "QUERY", 8: "GUARD", 9: "SETEXCH", 10: "RESUME", 11: "RAISE",
    12: "GETARGS", 13: "ENUMENV", 14: "GETPPID", 15: "OPEN", 16: "CLOSE",
    17: "ENUMHANDLES", 18: "TLSGET", 19: "TLSSET", 20: "MEMSTATS",
    21: "TCREATE", 22: "TYIELD", 23: "TJOIN", 24: "TGETCTX", 25: "ENUMMODS",
}
SYS_NUMBERS = {v: k for k, v in SYS_NAMES.items()}
STATUS_DENIED = 2


class RunLimitError(RuntimeError):
    pass


class CycleLimitExceeded(RunLimitError):
    pass


class MemoryLimitExceeded(RunLimitError):
    pass


class Deadlock(RunLimitError):
    pass


@dataclass(frozen=True)
class Limits:
    max_cycles: int = 50_000_000
    max_pages: int = 8192


@dataclass
class ExceptionRecord:
    code: int
    fault_addr: int
    pc: int
    flags: int
    regs: tuple[int, ...]
    lastip: int
    tid: int = 0

    def words(self) -> list[int]:
        return [self.code, self.fault_addr, self.pc, self.flags, *self.regs,
                self.lastip, self.tid, 0]

    def __str__(self) -> str:
        return (f"{FAULT_NAMES.get(self.code, self.code)} pc=0x{self.pc:08X} "
                f"addr=0x{self.fault_addr:08X}")


@dataclass
class ObservableTrace:
    output: bytes
    exit_code: int
    regs: tuple[int, ...]
    cycles: int

    def to_bytes(self) -> bytes:
        doc = {"output": self.output.hex(), "exit_code": self.exit_code,
               "regs": list(self.regs), "cycles": self.cycles}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    def same_behaviour(self, other: "ObservableTrace") -> bool:
        """Equality over output, exit code and final registers (cycles ignored)."""
        return (self.output, self.exit_code, self.regs) == (
            other.output, other.exit_code, other.regs)


class Thread:
    __slots__ = ("tid", "regs", "pc", "flags", "lastip", "tls", "status",
                 "join", "exit_code", "handler", "fault", "engine")

    def __init__(self, tid: int, pc: int, sp: int, engine: bool = False):
        self.tid = tid
        self.regs = [0] * 8
        self.regs[7] = sp
        self.pc = pc
        self.flags = 0
        self.lastip = 0
        self.tls = [0] * TLS_SLOTS
        self.status = "parked" if engine else "runnable"
        self.join = -1
        self.exit_code = 0
        self.handler = 0
        self.fault: ExceptionRecord | None = None
        self.engine = engine

    @property
    def frame(self) -> int:
        return FRAMES_BASE + self.tid * PAGE

    def context_words(self, pc: int | None = None) -> list[int]:
        return [0, 0, self.pc if pc is None else pc, self.flags, *self.regs,
                self.lastip, self.tid, 0]


class Machine:
    """One guest process: address space, thread table and OS environment."""

    def __init__(self, img: Image, name: str = "main", limits: Limits | None = None,
                 instr_log: TextIO | None = None):
        self.image = img
        self.limits = limits or Limits()
        self.mem = AddressSpace()
        self.threads: dict[int, Thread] = {}
        self.cycles = 0
        self.output = bytearray()
        self.args = bytes(img.args)
        self.env = [bytes(e) for e in img.env]
        self.modules = [name.encode()]
        self.ppid = 1
        self.handles: dict[int, int] = {}
        self.alloc_regions: dict[int, int] = {}
        self.finished = False
        self.exit_code = 0
        self.final_regs: tuple[int, ...] = (0,) * 8
        self.instr_log = instr_log
        self.sys_clock: list[int] | None = None
        # Engine attachment points; all None for native execution.
        self.callout: Callable[[Thread, int, int], int] | None = None
        self.on_thread_create: list[Callable[[Thread], None]] = []
        self.commit_basis: Callable[[], int] = lambda: self.mem.committed
        self.current: Thread | None = None
        for seg in img.segments:
            first = seg.vaddr >> PAGE_SHIFT
            self.mem.map(first, page_round(max(seg.memlen, 1)) >> PAGE_SHIFT, seg.perms)
            if seg.data:
                self.mem.poke(seg.vaddr, seg.data)
        main = Thread(0, img.entry, STACK_TOP)
        self._map_thread(main)
        self.threads[0] = main

    # -- threads -----------------------------------------------------------
    def _map_thread(self, t: Thread) -> None:
        top = STACK_TOP - t.tid * STACK_PAGES * PAGE
        t.regs[7] = top
        self.mem.map((top >> PAGE_SHIFT) - STACK_PAGES, STACK_PAGES, PERM_RW)
        self.mem.map(t.frame >> PAGE_SHIFT, 1, PERM_RW)

    def free_tid(self) -> int:
        for tid in range(MAX_THREADS):
            if tid not in self.threads:
                return tid
        return -1

    def add_engine_thread(self, tid: int, pc: int) -> Thread:
        t = Thread(tid, pc, 0, engine=True)
        self.threads[tid] = t
        return t

    def exit_thread(self, t: Thread, code: int) -> int:
        t.status = "exited"
        t.exit_code = code & M32
        for other in self.threads.values():
            if other.status == "blocked" and other.join == t.tid:
                other.status = "runnable"
                other.regs[0] = t.exit_code
        if t.tid == 0:
            self.finished = True
            self.exit_code = t.exit_code
            self.final_regs = tuple(t.regs)
        return EXITED

    # -- exceptions -----------------------------------------------------
    def make_record(self, t: Thread, code: int, addr: int, pc: int) -> ExceptionRecord:
        return ExceptionRecord(code, addr & M32, pc & M32, t.flags, tuple(t.regs),
                               t.lastip, t.tid)

    def _fault(self, t: Thread, code: int, addr: int, pc: int) -> int:
        t.fault = self.make_record(t, code, addr, pc)
        return FAULTED

    def deliver_exception(self, t: Thread, rec: ExceptionRecord) -> int:
        """Enter the registered handler, or terminate the thread with 128+code."""
        t.fault = None
        if not t.handler:
            return self.exit_thread(t, 128 + rec.code)
        frame = t.frame
        self.mem.poke(frame, b"".join((w & M32).to_bytes(4, "little") for w in rec.words()))
        t.regs[1] = frame
        t.pc = t.handler
        t.handler = 0
        return FAULTED

    # -- the reference interpreter ------------------------------------------
    def step(self, t: Thread) -> int:
        pc = t.pc
        try:
            w = self.mem.fetch(pc)
        except MemFault as f:
            return self._fault(t, f.code, f.addr, pc)
        return self.execute(t, w, pc)

    def execute(self, t: Thread, w: int, pc: int) -> int:
        """Execute instruction word ``w`` as if fetched from ``pc``."""
        mem = self.mem
        op = w & 0xFF
        if not OPCODE_VALID[op] or w & 0x8800:
            return self._fault(t, ILLEGAL_OPCODE, pc, pc)
        regs = t.regs
        rd = (w >> 12) & 7
        rs = (w >> 8) & 7
        imm = w >> 16
        npc = pc + 4
        try:
            if op == 0x05:      # ADD
                regs[rd], t.flags = _flags_add(regs[rd], regs[rs])
                t.lastip = pc
            elif op == 0x0E:    # ADDI
                regs[rd], t.flags = _flags_add(regs[rd], (imm - 0x10000 if imm & 0x8000 else imm) & M32)
                t.lastip = pc
            elif op == 0x02:    # MOVri
                regs[rd] = imm
            elif op == 0x31:    # CMPI
                t.flags = _flags_sub(regs[rd], (imm - 0x10000 if imm & 0x8000 else imm) & M32)[1]
                t.lastip = pc
            elif op == 0x30:    # CMP
                t.flags = _flags_sub(regs[rd], regs[rs])[1]
                t.lastip = pc
            elif 0x21 <= op <= 0x24:
                f = t.flags
                if op == 0x21:
                    taken = f & FLAG_Z
                elif op == 0x22:
                    taken = not f & FLAG_Z
                else:
                    lt = bool(f & FLAG_N) != bool(f & FLAG_V)
                    taken = lt if op == 0x23 else not lt
                if taken:
                    npc += (imm - 0x10000 if imm & 0x8000 else imm) << 2
            elif op == 0x10:    # LD
                regs[rd] = mem.read32((regs[rs] + (imm - 0x10000 if imm & 0x8000 else imm)) & M32)
            elif op == 0x11:    # ST
                mem.write32((regs[rd] + (imm - 0x10000 if imm & 0x8000 else imm)) & M32, regs[rs])
            elif op == 0x12:    # LDB
                regs[rd] = mem.read8((regs[rs] + (imm - 0x10000 if imm & 0x8000 else imm)) & M32)
            elif op == 0x13:    # STB
                mem.write8((regs[rd] + (imm - 0x10000 if imm & 0x8000 else imm)) & M32, regs[rs])
            elif op == 0x20:    # JMP
                npc += (imm - 0x10000 if imm & 0x8000 else imm) << 2
            elif op == 0x04:    # MOVrr
                regs[rd] = regs[rs]
            elif op == 0x03:    # MOVHI
                regs[rd] = (regs[rd] & 0xFFFF) | (imm << 16)
            elif op == 0x06:    # SUB
                regs[rd], t.flags = _flags_sub(regs[rd], regs[rs])
                t.lastip = pc
            elif 0x07 <= op <= 0x0D:    # MUL DIV AND OR XOR SHL SHR
                if op == 0x08 and regs[rs] == 0:
                    return self._fault(t, DIV_ZERO, 0, pc)
                regs[rd], t.flags = _alu(op, regs[rd], imm if op >= 0x0C else regs[rs])
                t.lastip = pc
            elif op == 0x26 or op == 0x27:  # CALL / CALLR
                sp = (regs[7] - 4) & M32
                mem.write32(sp, npc & M32)
                regs[7] = sp
                npc = regs[rs] if op == 0x27 else npc + ((imm - 0x10000 if imm & 0x8000 else imm) << 2)
            elif op == 0x28:    # RET
                npc = mem.read32(regs[7])
                regs[7] = (regs[7] + 4) & M32
            elif op == 0x25:    # JMPR
                npc = regs[rs]
            elif op == 0x50:    # PUSH
                sp = (regs[7] - 4) & M32
                mem.write32(sp, regs[rs])
                regs[7] = sp
            elif op == 0x51:    # POP
                v = mem.read32(regs[7])
                regs[7] = (regs[7] + 4) & M32
                regs[rd] = v
            elif op == 0x32:    # RDLIP
                regs[rd] = t.lastip
            elif op == 0x40:    # SYS
                self.cycles += 10
                t.pc = npc & M32
                out = self.syscall(t, pc)
                if self.sys_clock is not None:
                    self.sys_clock.append(self.cycles)
                if self.instr_log is not None:
                    self.instr_log.write(f"{t.tid} 0x{pc:08X} SYS {self.cycles}\n")
                return out
            elif op == 0xF0:    # CALLOUT
                if self.callout is None:
                    return self._fault(t, ILLEGAL_OPCODE, pc, pc)
                return self.callout(t, w, pc)
        except MemFault as f:
            return self._fault(t, f.code, f.addr, pc)
        t.pc = npc & M32
        self.cycles += OPCODE_COST[op]
        if self.instr_log is not None:
            self.instr_log.write(f"{t.tid} 0x{pc:08X} {Op(op).name} {self.cycles}\n")
        return CONTINUE

    # -- scheduling ------------------------------------------------------------
    def run(self, run_slice: Callable[[Thread], int]) -> None:
        """Deterministic round-robin: each thread runs until it yields, blocks,
        exits or takes a fault; the run ends when thread 0 exits."""
        order = 0
        while not self.finished:
            t = None
            for i in range(MAX_THREADS):
                cand = self.threads.get((order + i) % MAX_THREADS)
                if cand is not None and cand.status == "runnable":
                    t = cand
                    break
            if t is None:
                raise Deadlock("no runnable guest thread")
            self.current = t
            run_slice(t)
            order = (t.tid + 1) % MAX_THREADS
        self.current = None

    def check_limits(self) -> None:
        if self.cycles > self.limits.max_cycles:
            raise CycleLimitExceeded(f"cycle limit {self.limits.max_cycles} exceeded")
        if self.mem.committed > 4 * self.limits.max_pages:
            raise MemoryLimitExceeded(f"committed pages {self.mem.committed}")

    def trace(self, cycles: int | None = None) -> ObservableTrace:
        return ObservableTrace(bytes(self.output), self.exit_code, self.final_regs,
                               self.cycles if cycles is None else cycles)

    # -- syscalls ----------------------------------------------------------------
    def syscall(self, t: Thread, sys_pc: int) -> int:
        """Raw (un-virtualized) syscall semantics; number in R0."""
        handler = _SYSCALLS.get(t.regs[0])
        if handler is None:
            t.regs[0] = M32
            return CONTINUE
        return handler(self, t, sys_pc)

    def _sys_exit(self, t, pc):
        return self.exit_thread(t, t.regs[1])

    def _sys_write(self, t, pc):
        data = self.mem.copy_out(t.regs[1], t.regs[2])
        if data is None:
            t.regs[0] = 1
        else:
            self.output += data
            t.regs[0] = 0
        return CONTINUE

    def _sys_time(self, t, pc):
        t.regs[0] = self.cycles & M32
        return CONTINUE

    def alloc(self, npages: int, perms: int, committed: int) -> int:
        if npages <= 0 or committed + npages > self.limits.max_pages:
            return 0
        first, end = ALLOC_BASE >> PAGE_SHIFT, ALLOC_END >> PAGE_SHIFT
        pages = self.mem.pages
        cand = first
        while cand + npages <= end:
            clash = -1
            for idx in range(cand + npages - 1, cand - 1, -1):
                if idx in pages:
                    clash = idx
                    break
            if clash < 0:
                self.mem.map(cand, npages, perms & PERM_RWX)
                self.alloc_regions[cand] = npages
                return cand << PAGE_SHIFT
            cand = clash + 1
        return 0

    def _sys_alloc(self, t, pc):
        t.regs[0] = self.alloc(t.regs[1], t.regs[2], self.commit_basis())
        return CONTINUE

    def _engine_page(self, addr: int) -> bool:
        page = self.mem.pages.get((addr & M32) >> PAGE_SHIFT)
        return page is not None and page.engine

    def _sys_free(self, t, pc):
        addr = t.regs[1]
        if self._engine_page(addr):
            t.regs[0] = STATUS_DENIED
            return CONTINUE
        idx = addr >> PAGE_SHIFT
        if addr & (PAGE - 1) or idx not in self.alloc_regions:
            t.regs[0] = 1
            return CONTINUE
        n = self.alloc_regions.pop(idx)
        self._notify_code_pages(idx, n)
        self.mem.unmap(idx, n)
        t.regs[0] = 0
        return CONTINUE

    def _notify_code_pages(self, first: int, count: int) -> None:
        hook = self.mem.on_code_write
        if hook is None:
            return
        for idx in range(first, first + count):
            page = self.mem.pages.get(idx)
            if page is not None and page.code:
                hook(idx)

    def _sys_protect(self, t, pc):
        addr, n, perms = t.regs[1], t.regs[2], t.regs[3]
        first = addr >> PAGE_SHIFT
        pages = [self.mem.pages.get(i) for i in range(first, min(first + n, 1 << 20))]
        if any(p is not None and p.engine for p in pages):
            t.regs[0] = STATUS_DENIED
        elif n == 0 or any(p is None for p in pages):
            t.regs[0] = 1
        else:
            self._notify_code_pages(first, n)
            for p in pages:
                p.perms = perms & PERM_RWX
            t.regs[0] = 0
        return CONTINUE

    def query(self, addr: int, hide_engine: bool = False,
              true_perms: bool = False) -> tuple[int, int, int, int]:
        # Translated code pages are write-watched; their W bit reads as clear.
        perms_of = (lambda p: p.perms) if true_perms else (
            lambda p: p.perms & ~2 if p.code else p.perms)
        mapped, perms, base, size = self.mem.region(addr, hide_engine, perms_of)
        return int(mapped), perms, base & M32, size & M32

    def _sys_query(self, t, pc):
        t.regs[0], t.regs[1], t.regs[2], t.regs[3] = self.query(t.regs[1])
        return CONTINUE

    def _sys_guard(self, t, pc):
        addr = t.regs[1]
        page = self.mem.pages.get(addr >> PAGE_SHIFT)
        if page is None:
            t.regs[0] = 1
        elif page.engine:
            t.regs[0] = STATUS_DENIED
        else:
            self._notify_code_pages(addr >> PAGE_SHIFT, 1)
            page.guard = True
            t.regs[0] = 0
        return CONTINUE

    def _sys_setexch(self, t, pc):
        t.handler = t.regs[1]
        t.regs[0] = 0
        return CONTINUE

    def _sys_resume(self, t, pc):
        raw = self.mem.copy_out(t.regs[1], FRAME_WORDS * 4)
        if raw is None:
            t.regs[0] = 1
            return CONTINUE
        words = [int.from_bytes(raw[i:i + 4], "little") for i in range(0, len(raw), 4)]
        t.pc = words[2]
        t.flags = words[3] & 0xF
        t.regs[:] = words[4:12]
        t.lastip = words[12]
        return CONTINUE

    def _sys_raise(self, t, pc):
        t.fault = self.make_record(t, t.regs[1], 0, pc)
        return FAULTED

    def _copy_entry(self, t: Thread, items: list[bytes], idx: int, buf: int, cap: int) -> int:
        if idx >= len(items):
            t.regs[0] = M32
            return CONTINUE
        entry = items[idx]
        if cap and not self.mem.copy_in(buf, entry[:cap]):
            t.regs[0] = M32
            return CONTINUE
        t.regs[0] = len(entry)
        return CONTINUE

    def _sys_getargs(self, t, pc):
        cap = t.regs[2]
        if cap and not self.mem.copy_in(t.regs[1], self.args[:cap]):
            t.regs[0] = M32
        else:
            t.regs[0] = len(self.args)
        return CONTINUE

    def _sys_enumenv(self, t, pc):
        return self._copy_entry(t, self.env, t.regs[1], t.regs[2], t.regs[3])

    def _sys_enummods(self, t, pc):
        return self._copy_entry(t, self.modules, t.regs[1], t.regs[2], t.regs[3])

    def _sys_getppid(self, t, pc):
        t.regs[0] = self.ppid
        return CONTINUE

    def open_handle(self, kind: int) -> int:
        h = 4
        while h in self.handles:
            h += 4
        self.handles[h] = kind
        return h

    def _sys_open(self, t, pc):
        kind = t.regs[1]
        t.regs[0] = self.open_handle(kind) if 1 <= kind <= 4 else 0
        return CONTINUE

    def _sys_close(self, t, pc):
        t.regs[0] = 0 if self.handles.pop(t.regs[1], None) is not None else 1
        return CONTINUE

    def _sys_enumhandles(self, t, pc):
        items = sorted(self.handles.items())
        idx = t.regs[1]
        if idx < len(items):
            t.regs[0], t.regs[1] = items[idx]
        else:
            t.regs[0] = M32
        return CONTINUE

    def _sys_tlsget(self, t, pc):
        slot = t.regs[1]
        t.regs[0] = t.tls[slot] if slot < TLS_SLOTS else 0
        return CONTINUE

    def _sys_tlsset(self, t, pc):
        slot = t.regs[1]
        if slot < TLS_SLOTS:
            t.tls[slot] = t.regs[2]
            t.regs[0] = 0
        else:
            t.regs[0] = 1
        return CONTINUE

    def _sys_memstats(self, t, pc):
        t.regs[0], t.regs[1] = self.mem.committed, self.mem.peak
        return CONTINUE

    def create_thread(self, entry: int, arg: int) -> int:
        tid = self.free_tid()
        if tid < 0 or self.commit_basis() + STACK_PAGES + 1 > self.limits.max_pages:
            return -1
        nt = Thread(tid, entry, 0)
        self._map_thread(nt)
        nt.regs[1] = arg
        self.threads[tid] = nt
        for hook in self.on_thread_create:
            hook(nt)
        return tid

    def _sys_tcreate(self, t, pc):
        t.regs[0] = self.create_thread(t.regs[1], t.regs[2]) & M32
        return CONTINUE

    def _sys_tyield(self, t, pc):
        t.regs[0] = 0
        return YIELDED

    def _sys_tjoin(self, t, pc):
        target = self.threads.get(t.regs[1])
        if target is None or target is t or target.engine:
            t.regs[0] = M32
            return CONTINUE
        if target.status == "exited":
            t.regs[0] = target.exit_code
            return CONTINUE
        t.status = "blocked"
        t.join = target.tid
        return BLOCKED

    def _sys_tgetctx(self, t, pc):
        target = self.threads.get(t.regs[1])
        if target is None:
            t.regs[0] = M32
            return CONTINUE
        words = target.context_words(pc if target is t else None)
        ok = self.mem.copy_in(t.regs[2], b"".join((w & M32).to_bytes(4, "little")
                                                   for w in words))
        t.regs[0] = 0 if ok else 1
        return CONTINUE


_SYSCALLS = {
    1: Machine._sys_exit, 2: Machine._sys_write, 3: Machine._sys_time,
    4: Machine._sys_alloc, 5: Machine._sys_free, 6: Machine._sys_protect,
    7: Machine._sys_query, 8: Machine._sys_guard, 9: Machine._sys_setexch,
    10: Machine._sys_resume, 11: Machine._sys_raise, 12: Machine._sys_getargs,
    13: Machine._sys_enumenv, 14: Machine._sys_getppid, 15: Machine._sys_open,
    16: Machine._sys_close, 17: Machine._sys_enumhandles, 18: Machine._sys_tlsget,
    19: Machine._sys_tlsset, 20: Machine._sys_memstats, 21: Machine._sys_tcreate,
    22: Machine._sys_tyield, 23: Machine._sys_tjoin, 24: Machine._sys_tgetctx,
    25: Machine._sys_enummods,
}


def load(img: Image, name: str = "main", limits: Limits | None = None,
         instr_log: TextIO | None = None) -> Machine:
    return Machine(img, name=name, limits=limits, instr_log=instr_log)
