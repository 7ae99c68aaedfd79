"""Shield: hides the engine from the guest, one switchable group per resource."""

from __future__ import annotations

from ..engine.engine import (ARENA_HI, ARENA_LO, CMDLINE_PREFIX, ENV_MARKER,
                             MODULE_NAME)
from ..engine.events import ApiEvent, InstrEvent, Simulate
from ..isa import Op
from ..vm.machine import FRAME_OFF_PC, M32, ExceptionRecord
from .host import Plugin, PluginHost
from .instrctl import select

GROUPS = ("memory", "time", "context", "environment")
_LASTIP_OFF = 48


class Shield(Plugin):
    name = "Shield"
    depends = ("APIControl", "InstrControl")
    priority = 50

    def __init__(self, groups=GROUPS):
        groups = frozenset(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown shield groups: {sorted(unknown)}")
        self.groups = groups
        self.vhandles: dict[int, int] = {}

    def exports(self):
        return {"groups": lambda: sorted(self.groups)}

    def init(self, host: PluginHost) -> None:
        self.host = host
        engine = self.engine = host.engine
        hooks = {}
        if "time" in self.groups:
            hooks["TIME"] = self._time
        if "memory" in self.groups:
            engine.conceal_arena = True
            hooks.update(QUERY=self._query, FREE=self._arena_denied,
                         GUARD=self._arena_denied, PROTECT=self._protect,
                         MEMSTATS=self._memstats)
        if "context" in self.groups:
            host.call("InstrControl.register", self, select(opcodes=[Op.RDLIP]),
                      "after", self._rdlip)
            hooks["TGETCTX"] = self._tgetctx
            host.call("APIControl.register", self, "TGETCTX", "after", self._tgetctx_after)
            engine.exception_filters.append(self._exception)
        if "environment" in self.groups:
            engine.tls_scratch = False
            engine.maintenance_in_table = False
            hooks.update(GETARGS=self._getargs, ENUMENV=self._enumenv,
                         ENUMMODS=self._enummods, GETPPID=lambda ev: Simulate(1),
                         OPEN=lambda ev: None, CLOSE=self._close,
                         ENUMHANDLES=self._enumhandles)
            host.call("APIControl.register", self, "OPEN", "after", self._open_after)
            host.call("APIControl.register", self, "CLOSE", "after", self._close_after)
        for name, cb in hooks.items():
            host.call("APIControl.register", self, name, "before", cb)

    def loaded(self, host: PluginHost) -> None:
        if "memory" in self.groups:
            m = self.engine.machine
            m.mem.hide_engine = True
            m.commit_basis = lambda: m.mem.guest_committed

    # -- time ----------------------------------------------------------------
    def _time(self, ev: ApiEvent):
        return Simulate(self.engine.virtual & M32)

    # -- memory --------------------------------------------------------------
    def _query(self, ev: ApiEvent):
        return Simulate(*ev.machine.query(ev.args[1], hide_engine=True, true_perms=True))

    def _arena_denied(self, ev: ApiEvent):
        if self.engine.in_arena(ev.args[1]):
            return Simulate(1)
        return None

    def _protect(self, ev: ApiEvent):
        start = ev.args[1] & ~0xFFF
        end = start + ev.args[2] * 0x1000
        if ev.args[2] and start < ARENA_HI and end > ARENA_LO:
            return Simulate(1)
        return None

    def _memstats(self, ev: ApiEvent):
        mem = ev.machine.mem
        return Simulate(mem.guest_committed, mem.guest_peak)

    # -- context -------------------------------------------------------------
    def _rdlip(self, ev: InstrEvent) -> None:
        regs = ev.thread.regs
        regs[ev.instr.rd] = self.engine.reverse_lookup(regs[ev.instr.rd])

    def _tgetctx(self, ev: ApiEvent):
        target = ev.machine.threads.get(ev.args[1])
        if target is not None and target.engine:
            return Simulate(M32)
        return None

    def _tgetctx_after(self, ev: ApiEvent) -> None:
        if not ev.executed or ev.results[0] != 0:
            return
        mem, lookup, buf = ev.machine.mem, self.engine.reverse_lookup, ev.args[2]
        for off in (FRAME_OFF_PC, _LASTIP_OFF):
            raw = mem.copy_out((buf + off) & M32, 4)
            if raw is not None:
                v = int.from_bytes(raw, "little")
                fixed = lookup(v)
                if fixed != v:
                    mem.copy_in((buf + off) & M32, fixed.to_bytes(4, "little"))

    def _exception(self, rec: ExceptionRecord) -> ExceptionRecord:
        lookup = self.engine.reverse_lookup
        rec.pc, rec.lastip = lookup(rec.pc), lookup(rec.lastip)
        return rec

    # -- environment ----------------------------------------------------------
    def _copy_result(self, ev: ApiEvent, data: bytes, buf: int, cap: int):
        if cap and not ev.machine.mem.copy_in(buf, data[:cap]):
            return Simulate(M32)
        return Simulate(len(data))

    def _getargs(self, ev: ApiEvent):
        args = ev.machine.args
        if args.startswith(CMDLINE_PREFIX):
            args = args[len(CMDLINE_PREFIX):]
        return self._copy_result(ev, args, ev.args[1], ev.args[2])

    def _entry(self, ev: ApiEvent, items: list[bytes]):
        idx = ev.args[1]
        if idx >= len(items):
            return Simulate(M32)
        return self._copy_result(ev, items[idx], ev.args[2], ev.args[3])

    def _enumenv(self, ev: ApiEvent):
        return self._entry(ev, [e for e in ev.machine.env if e != ENV_MARKER])

    def _enummods(self, ev: ApiEvent):
        return self._entry(ev, [e for e in ev.machine.modules if e != MODULE_NAME])

    def _open_after(self, ev: ApiEvent) -> None:
        raw = ev.results[0]
        if ev.executed and raw:
            v = 4
            while v in self.vhandles:
                v += 4
            self.vhandles[v] = raw
            ev.results[0] = v

    def _close(self, ev: ApiEvent):
        v = ev.args[1]
        raw = self.vhandles.get(v)
        if raw is None:
            return Simulate(1)
        ev.data["virtual"] = v
        ev.args[1] = raw
        return None

    def _close_after(self, ev: ApiEvent) -> None:
        if ev.executed and ev.results[0] == 0:
            self.vhandles.pop(ev.data["virtual"], None)

    def _enumhandles(self, ev: ApiEvent):
        items = sorted(self.vhandles.items())
        idx = ev.args[1]
        if idx >= len(items):
            return Simulate(M32)
        v, raw = items[idx]
        return Simulate(v, ev.machine.handles.get(raw, 0))
