"""The translating engine: dispatcher, translator, callouts and the virtual clock."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, TextIO

from ..image import LIB_BASE, PAGE_SHIFT, PERM_RW, PERM_RWX, PERM_X, Image
from ..isa import (OPCODE_COST, DecodeError, Instruction, Op,
                   decode_word, encode_word, is_terminal)
from ..vm.machine import (CONTINUE, FAULTED, HANDLE_LOG, M32, FLAG_N, FLAG_V,
                          FLAG_Z, CycleLimitExceeded, ExceptionRecord, Limits,
                          Machine, ObservableTrace, Thread)
from ..vm.memory import (FAULT_EXEC_NX, FAULT_EXEC_UNMAPPED, GUARD_HIT,
                         ILLEGAL_OPCODE, MemFault)
from .cache import (CACHE_BASE, CORE_BASE, CORE_PAGES, CTX_BASE, CTX_PAGES,
                    CTX_STRIDE, SPILL_ADDR, Callout, CodeCache, TranslatedBlock)
from .events import SKIP, InstrEvent

log = logging.getLogger(__name__)

ARENA_LO, ARENA_HI = 0xC0000000, 0xE0000000

DISPATCH_COST = 5
TRANSLATE_BLOCK_COST = 100
TRANSLATE_INSN_COST = 10
DETOUR_COST = 20
MAX_BLOCK = 64

MAINT_TID = 15
TLS_SCRATCH_SLOT = 15
CMDLINE_PREFIX = b"dbi -- "
ENV_MARKER = b"DBI_SESSION=1"
MODULE_NAME = b"engine.core"
PARENT_PID = 999

# The legacy disassembler table reduces immediate shift counts mod 32.
LEGACY_MASKED = frozenset({Op.SHL, Op.SHR})


class EngineAbort(RuntimeError):
    """The engine cannot continue translating the guest."""


@dataclass
class EngineConfig:
    link_blocks: bool = False
    smc_invalidate: bool = True
    disasm: str = "full"
    api_hook_mode: str = "dbi"

    def __post_init__(self) -> None:
        if self.disasm not in ("full", "legacy"):
            raise ValueError(f"unknown disassembler {self.disasm!r}")
        if self.api_hook_mode not in ("dbi", "detour"):
            raise ValueError(f"unknown api_hook_mode {self.api_hook_mode!r}")


@dataclass
class EngineMetrics:
    blocks_translated: int = 0
    instrs_translated: int = 0
    dispatches: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    callouts: int = 0
    invalidations: int = 0
    flushes: int = 0
    links: int = 0
    real_cycles: int = 0
    virtual_cycles: int = 0
    arena_pages: int = 0

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass
class InstrumentedResult:
    trace: ObservableTrace
    metrics: EngineMetrics
    sys_clock: list[int]


class _TState:
    __slots__ = ("in_cache", "skipped")

    def __init__(self) -> None:
        self.in_cache = False
        self.skipped = False


def _callout_word(cid: int) -> int:
    return int(Op.CALLOUT) | cid << 16


class Engine:
    """Runs one guest through a code cache.

    Plugins configure the engine before :meth:`load` through the attributes
    below: ``instr_hooks`` supplies compiled instruction callbacks, ``api``
    intercepts syscalls, ``exception_filters`` rewrite exception records.
    """

    def __init__(self, config: EngineConfig | None = None):
        self.config = config or EngineConfig()
        self.machine: Machine | None = None
        self.cache: CodeCache | None = None
        self.metrics = EngineMetrics()
        self.virtual = 0
        self.sys_clock: list[int] = []
        self.errors: list[str] = []
        # plugin attachment points
        self.instr_hooks: Callable[[Instruction, str], tuple] | None = None
        self.api: Callable[[Thread, int], int] | None = None
        self.exception_filters: list[Callable[[ExceptionRecord], ExceptionRecord]] = []
        self.enforce_fetch = False
        self.conceal_arena = False
        self.tls_scratch = True
        self.maintenance_in_table = True
        self.detours: dict[int, int] = {}
        self._tstate: dict[int, _TState] = {}
        self._ctx_mapped: set[int] = set()
        self._redirect = False
        self._flush_pending = False

    # -- setup -------------------------------------------------------------
    def load(self, img: Image, name: str = "main", limits: Limits | None = None,
             instr_log: TextIO | None = None) -> Machine:
        m = Machine(img, name=name, limits=limits, instr_log=instr_log)
        self.machine = m
        self.cache = CodeCache(m.mem)
        m.callout = self._callout
        m.on_thread_create.append(self._thread_created)
        m.mem.on_code_write = self._code_written
        mem = m.mem
        mem.map(CORE_BASE >> PAGE_SHIFT, CORE_PAGES, PERM_RWX, engine=True)
        mem.poke(CORE_BASE, MODULE_NAME)
        mem.map(SPILL_ADDR >> PAGE_SHIFT, 1, PERM_RW, engine=True)
        self._map_ctx(0)
        self._map_ctx(MAINT_TID)
        if self.maintenance_in_table:
            m.add_engine_thread(MAINT_TID, CORE_BASE + 0x100)
        m.args = CMDLINE_PREFIX + m.args
        m.env.append(ENV_MARKER)
        m.modules.append(MODULE_NAME)
        m.ppid = PARENT_PID
        m.open_handle(HANDLE_LOG)
        if self.config.api_hook_mode == "detour":
            self._install_detours(img)
        return m

    def _map_ctx(self, tid: int) -> None:
        if tid not in self._ctx_mapped:
            self._ctx_mapped.add(tid)
            self.machine.mem.map((CTX_BASE + tid * CTX_STRIDE) >> PAGE_SHIFT, CTX_PAGES,
                                 PERM_RW, engine=True)

    def _thread_created(self, t: Thread) -> None:
        self._map_ctx(t.tid)

    def _install_detours(self, img: Image) -> None:
        """Patch ``MOVri R0, n; SYS`` stubs in lib segments with CALLOUTs."""
        mem = self.machine.mem
        for seg in img.segments:
            if not seg.perms & PERM_X or not LIB_BASE <= seg.vaddr < LIB_BASE + 0x100000:
                continue
            for addr in range(seg.vaddr, seg.vaddr + len(seg.data) - 4, 4):
                w, nxt = mem.peek32(addr), mem.peek32(addr + 4)
                if w & 0xFFFF == int(Op.MOVri) and nxt & 0xFF == int(Op.SYS):
                    self.detours[addr] = w >> 16
                    mem.poke(addr, _callout_word(0xFFFF).to_bytes(4, "little"))

    # -- public queries ------------------------------------------------------
    def reverse_lookup(self, addr: int) -> int:
        return self.cache.reverse_lookup(addr)

    def in_arena(self, addr: int) -> bool:
        return ARENA_LO <= addr < ARENA_HI

    def log_error(self, msg: str) -> None:
        self.errors.append(msg)
        log.warning("%s", msg)

    # -- main loop -------------------------------------------------------------
    def run(self) -> InstrumentedResult:
        m = self.machine
        m.run(self._slice)
        self.metrics.real_cycles = m.cycles
        self.metrics.virtual_cycles = self.virtual
        self.metrics.arena_pages = self.cache.pages_used
        # the trace reports guest-retired cycles; engine overhead is in metrics
        return InstrumentedResult(m.trace(self.virtual), self.metrics, list(self.sys_clock))

    def _state(self, t: Thread) -> _TState:
        ts = self._tstate.get(t.tid)
        if ts is None:
            ts = self._tstate[t.tid] = _TState()
        return ts

    def _slice(self, t: Thread) -> int:
        m = self.machine
        step = m.step
        cap = m.limits.max_cycles
        vcost = self.cache.vcost
        ts = self._state(t)
        while True:
            if ts.in_cache:
                pc = t.pc
                c = vcost.get(pc)
                r = step(t)
                if r == CONTINUE:
                    if c:
                        self.virtual += c
                    if self._redirect:
                        self._smc_redirect(t, ts, pc)
                    if m.cycles > cap:
                        raise CycleLimitExceeded(f"cycle limit {cap} exceeded")
                    continue
            elif ARENA_LO <= t.pc < ARENA_HI:
                pc = t.pc
                if self.conceal_arena:
                    r = m._fault(t, FAULT_EXEC_UNMAPPED, pc, pc)
                else:
                    # A guest jump into the arena runs the copies physically.
                    r = step(t)
                    if r == CONTINUE:
                        if m.cycles > cap:
                            raise CycleLimitExceeded(f"cycle limit {cap} exceeded")
                        continue
            else:
                r = self._dispatch(t, ts)
                if r == CONTINUE:
                    continue
            ts.in_cache = False
            if r == FAULTED:
                self._deliver(t)
            m.check_limits()
            return r

    def _deliver(self, t: Thread) -> None:
        rec = t.fault
        for f in self.exception_filters:
            try:
                rec = f(rec)
            except Exception as exc:  # noqa: BLE001 - filters never abort a run
                self.log_error(f"exception filter failed: {exc!r}")
        self.machine.deliver_exception(t, rec)

    # -- dispatcher ----------------------------------------------------------
    def _dispatch(self, t: Thread, ts: _TState) -> int:
        m = self.machine
        if self._flush_pending:
            self.flush()
        self._redirect = False
        pc = t.pc
        self.metrics.dispatches += 1
        m.cycles += DISPATCH_COST
        if self.enforce_fetch:
            page = m.mem.pages.get(pc >> PAGE_SHIFT)
            if page is None or pc & 3:
                return m._fault(t, FAULT_EXEC_UNMAPPED, pc, pc)
            if page.guard:
                page.guard = False
                return m._fault(t, GUARD_HIT, pc, pc)
            if not page.perms & PERM_X:
                return m._fault(t, FAULT_EXEC_NX, pc, pc)
        b = self.cache.blocks.get(pc)
        if b is None:
            self.metrics.cache_misses += 1
            b = self.translate(pc)
        else:
            self.metrics.cache_hits += 1
        if self.tls_scratch:
            t.tls[TLS_SCRATCH_SLOT] = SPILL_ADDR
        t.pc = b.cache_entry
        ts.in_cache = True
        return CONTINUE

    # -- translator ----------------------------------------------------------
    def _recode(self, w: int, ins: Instruction) -> int:
        if self.config.disasm == "legacy" and ins.op in LEGACY_MASKED and ins.imm > 31:
            return (w & 0xFFFF) | (ins.imm & 31) << 16
        return w

    def translate(self, at: int) -> TranslatedBlock:
        """Translate the guest block at ``at`` into the cache."""
        cache = self.cache
        if not cache.room_for(4 * MAX_BLOCK + 8):
            self.flush()
        mem = self.machine.mem
        hooks = self.instr_hooks
        base = cache.cursor
        words: list[int] = []
        copies: dict[int, int] = {}
        stubs: dict[int, int] = {}
        callouts: list[Callout] = []
        vcost = cache.vcost

        def slot(c: Callout) -> Callout:
            c.cache = base + 4 * len(words)
            words.append(_callout_word(cache.new_callout(c)))
            stubs[c.cache] = c.guest
            callouts.append(c)
            return c

        page_end = (at | 0xFFF) + 1
        addr, n = at, 0
        while True:
            if n >= MAX_BLOCK or addr >= page_end:
                slot(Callout("term", addr, target=addr))
                break
            w = mem.peek32(addr)
            if w is None:
                if n == 0:
                    raise EngineAbort(f"execution of unmapped address 0x{addr:08X}")
                slot(Callout("term", addr, target=addr))
                break
            try:
                ins = decode_word(w, addr)
            except DecodeError as exc:
                if n:
                    slot(Callout("term", addr, target=addr))
                elif self.enforce_fetch:
                    slot(Callout("fault", addr))
                else:
                    raise EngineAbort(f"cannot decode 0x{w:08X} at 0x{addr:08X}: {exc}") from None
                break
            if ins.op is Op.CALLOUT:
                if addr in self.detours:
                    slot(Callout("detour", addr, instr=ins, data=self.detours[addr]))
                elif n:
                    slot(Callout("term", addr, target=addr))
                elif self.enforce_fetch:
                    slot(Callout("fault", addr))
                else:
                    raise EngineAbort(f"guest CALLOUT at 0x{addr:08X}")
                break
            pre = hooks(ins, "before") if hooks else ()
            post = hooks(ins, "after") if hooks else ()
            if is_terminal(ins):
                if pre:
                    slot(Callout("pre", addr, instr=ins, hooks=pre, data="term"))
                slot(Callout("term", addr, instr=ins, hooks=post))
                break
            pc = slot(Callout("pre", addr, instr=ins, hooks=pre)) if pre else None
            copy_at = base + 4 * len(words)
            words.append(self._recode(w, ins))
            copies[copy_at] = addr
            vcost[copy_at] = OPCODE_COST[ins.op]
            if post:
                slot(Callout("post", addr + 4, instr=ins, hooks=post))
            if pc is not None:
                pc.skip_to = copy_at + 4
            n += 1
            addr += 4
        start = cache.emit(words)
        assert start == base
        page_idx = at >> PAGE_SHIFT
        b = TranslatedBlock(at, base, cache.cursor, addr, n, callouts[-1].kind,
                            frozenset({page_idx}), copies, stubs, callouts)
        for c in callouts:
            c.block = b
        cache.insert(b)
        page = mem.pages.get(page_idx)
        if page is not None:
            page.code = True
        self.metrics.blocks_translated += 1
        self.metrics.instrs_translated += n
        self.machine.cycles += TRANSLATE_BLOCK_COST + TRANSLATE_INSN_COST * n
        return b

    # -- invalidation ---------------------------------------------------------
    def _code_written(self, idx: int) -> None:
        if self.config.smc_invalidate:
            self.invalidate(idx)

    def invalidate(self, idx: int) -> int:
        """Drop every block translated from guest page ``idx``."""
        owners = self.cache.by_page.get(idx)
        if not owners:
            return 0
        dropped = [self.cache.blocks[g] for g in sorted(owners)]
        for b in dropped:
            self._drop(b)
        page = self.machine.mem.pages.get(idx)
        if page is not None:
            page.code = False
        self._redirect = True
        return len(dropped)

    def _drop(self, b: TranslatedBlock) -> None:
        cache = self.cache
        for c in list(b.incoming):
            self._unlink(c)
        for c in b.callouts:
            if c.linked is not None:
                self._unlink(c)
        cache.drop(b)
        self.metrics.invalidations += 1

    def _unlink(self, c: Callout) -> None:
        self.machine.mem.poke(c.cache, _callout_word(c.cid).to_bytes(4, "little"))
        c.linked.incoming.discard(c)
        c.linked = None
        self.cache.vcost.pop(c.cache, None)

    def _smc_redirect(self, t: Thread, ts: _TState, pc: int) -> None:
        self._redirect = False
        if not ts.in_cache or t.pc in self.cache.reverse:
            return
        g = self.cache.graveyard.get(pc)
        if g is None:
            g = self.cache.reverse_lookup(pc)
        t.pc = (g + 4) & M32
        ts.in_cache = False

    def flush(self) -> None:
        """Full cache reset."""
        self._flush_pending = False
        m = self.machine
        cache = self.cache
        for t in m.threads.values():
            if CACHE_BASE <= t.lastip < ARENA_HI:
                t.lastip = cache.reverse_lookup(t.lastip)
        for idx in cache.by_page:
            page = m.mem.pages.get(idx)
            if page is not None:
                page.code = False
        cache.reset()
        self.metrics.flushes += 1

    def request_flush(self) -> None:
        if self.cache is not None and self.cache.blocks:
            self._flush_pending = True

    # -- callouts --------------------------------------------------------------
    def _callout(self, t: Thread, w: int, pc: int) -> int:
        m = self.machine
        cache = self.cache
        cid = w >> 16
        c = cache.callouts[cid] if cid < len(cache.callouts) else None
        ts = self._tstate.get(t.tid)
        if (c is None or c.cache != pc or ts is None or not ts.in_cache
                or not c.block.valid):
            g = cache.reverse_lookup(pc)
            return m._fault(t, ILLEGAL_OPCODE, g, g)
        self.metrics.callouts += 1
        kind = c.kind
        if kind == "term":
            return self._terminal(t, ts, c)
        if kind == "pre":
            return self._pre(t, ts, c)
        if kind == "post":
            executed = not ts.skipped
            ts.skipped = False
            self._fire(c.hooks, t, c.guest - 4, c.instr, "after", executed)
            t.pc = pc + 4
            return CONTINUE
        if kind == "fault":
            return m._fault(t, ILLEGAL_OPCODE, c.guest, c.guest)
        # detour: emulate the patched MOVri R0, n
        t.regs[0] = c.data
        self.virtual += 1
        m.cycles += 1 + DETOUR_COST
        return self._leave(t, ts, c.guest + 4)

    def _fire(self, hooks: tuple, t: Thread, addr: int, ins: Instruction, phase: str,
              executed: bool = False):
        ev = InstrEvent(self, t, addr, ins, phase, executed)
        decision = None
        for cb in hooks:
            try:
                res = cb(ev)
            except Exception as exc:  # noqa: BLE001 - hooks never abort a run
                self.log_error(f"instruction hook {cb!r} failed at 0x{addr:08X}: {exc!r}")
                continue
            if res is not None and decision is None and phase == "before":
                decision = res
        return decision

    def _pre(self, t: Thread, ts: _TState, c: Callout) -> int:
        decision = self._fire(c.hooks, t, c.guest, c.instr, "before")
        if decision is None:
            t.pc = c.cache + 4
            return CONTINUE
        if c.data == "term":
            if decision is SKIP:
                return self._leave(t, ts, c.guest + 4)
            self.log_error(f"replacement of control instruction at 0x{c.guest:08X} ignored")
            t.pc = c.cache + 4
            return CONTINUE
        if decision is SKIP:
            ts.skipped = True
            t.pc = c.skip_to
            return CONTINUE
        if isinstance(decision, Instruction) and not is_terminal(decision):
            r = self.machine.execute(t, encode_word(decision), c.cache + 4)
            if r == CONTINUE:
                self.virtual += OPCODE_COST[decision.op]
                t.pc = c.skip_to
            return r
        self.log_error(f"unusable hook decision {decision!r} at 0x{c.guest:08X}")
        t.pc = c.cache + 4
        return CONTINUE

    def _leave(self, t: Thread, ts: _TState, target: int) -> int:
        t.pc = target & M32
        ts.in_cache = False
        return CONTINUE

    def _terminal(self, t: Thread, ts: _TState, c: Callout) -> int:
        ins = c.instr
        if ins is None:
            self._maybe_link(c, c.target)
            return self._leave(t, ts, c.target)
        op = ins.op
        if op is Op.SYS:
            return self._syscall(t, ts, c)
        m = self.machine
        regs = t.regs
        g = c.guest
        npc = g + 4
        if op is Op.RDLIP:
            regs[ins.rd] = t.lastip
            self.virtual += 1
            m.cycles += 1
        else:
            try:
                if op is Op.JMP:
                    npc += ins.simm << 2
                elif Op.JZ <= op <= Op.JGE:
                    f = t.flags
                    if op is Op.JZ:
                        taken = f & FLAG_Z
                    elif op is Op.JNZ:
                        taken = not f & FLAG_Z
                    else:
                        lt = bool(f & FLAG_N) != bool(f & FLAG_V)
                        taken = lt if op is Op.JLT else not lt
                    if taken:
                        npc += ins.simm << 2
                elif op is Op.JMPR:
                    npc = regs[ins.rs]
                elif op is Op.CALL or op is Op.CALLR:
                    sp = (regs[7] - 4) & M32
                    m.mem.write32(sp, npc & M32)
                    regs[7] = sp
                    npc = regs[ins.rs] if op is Op.CALLR else npc + (ins.simm << 2)
                elif op is Op.RET:
                    npc = m.mem.read32(regs[7])
                    regs[7] = (regs[7] + 4) & M32
            except MemFault as f:
                return m._fault(t, f.code, f.addr, c.cache)
            self.virtual += 2
        if c.hooks:
            self._fire(c.hooks, t, g, ins, "after", True)
        if op is Op.JMP:
            self._maybe_link(c, npc & M32)
        return self._leave(t, ts, npc)

    def _syscall(self, t: Thread, ts: _TState, c: Callout) -> int:
        m = self.machine
        g = c.guest
        m.cycles += 10
        self.virtual += 10
        t.pc = (g + 4) & M32
        ts.in_cache = False
        r = self.api(t, g) if self.api is not None else m.syscall(t, g)
        self.sys_clock.append(self.virtual)
        if ARENA_LO <= t.pc < ARENA_HI:
            t.pc = self.cache.reverse_lookup(t.pc)
        if c.hooks:
            self._fire(c.hooks, t, g, c.instr, "after", True)
        return r

    # -- block linking -----------------------------------------------------------
    def _maybe_link(self, c: Callout, target: int) -> None:
        if not self.config.link_blocks:
            return
        c.hits += 1
        if c.hits < 2 or c.linked is not None:
            return
        tb = self.cache.blocks.get(target)
        if tb is None:
            return
        page = self.machine.mem.pages.get(target >> PAGE_SHIFT)
        if page is None or page.guard:
            return
        disp = (tb.cache_entry - (c.cache + 4)) >> 2
        if not -0x8000 <= disp < 0x8000:
            return
        word = int(Op.JMP) | (disp & 0xFFFF) << 16
        self.machine.mem.poke(c.cache, word.to_bytes(4, "little"))
        c.linked = tb
        tb.incoming.add(c)
        self.cache.vcost[c.cache] = 2 if c.instr is not None else 0
        self.metrics.links += 1


def run_instrumented(img: Image, plugins: Iterable | None = None,
                     config: EngineConfig | None = None, limits: Limits | None = None,
                     name: str = "main") -> InstrumentedResult:
    """Run ``img`` under the engine with the given plugin stack."""
    from ..plugins.host import PluginHost

    engine = Engine(config)
    host = PluginHost(list(plugins or ()))
    host.attach(engine)
    engine.load(img, name=name, limits=limits)
    host.loaded(engine)
    return engine.run()
