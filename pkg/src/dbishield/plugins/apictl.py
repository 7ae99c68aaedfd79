"""APIControl: callbacks around syscalls, with skip and simulate decisions."""

from __future__ import annotations

from typing import Callable

from ..engine.events import ApiEvent, Simulate
from ..vm.machine import CONTINUE, SYS_NAMES, Thread
from .host import Plugin, PluginHost


class APIControl(Plugin):
    name = "APIControl"
    priority = 0

    def __init__(self, mode: str = "dbi"):
        if mode not in ("dbi", "detour"):
            raise ValueError(f"unknown api hook mode {mode!r}")
        self.mode = mode
        self._regs: dict[int, tuple] = {}
        self._seq = 0
        self._compiled: dict[tuple[int, str], tuple] = {}
        self.host: PluginHost | None = None

    def exports(self):
        return {"register": self.register, "unregister": self.unregister}

    def init(self, host: PluginHost) -> None:
        self.host = host
        host.engine.api = self.fire
        if self.mode == "detour":
            host.engine.config.api_hook_mode = "detour"

    def register(self, owner, sysno: int | str | None, phase: str,
                 callback: Callable[[ApiEvent], object]) -> int:
        """Hook syscall ``sysno`` (a number, a name, or None for all)."""
        if phase not in ("before", "after"):
            raise ValueError(f"phase must be 'before' or 'after', not {phase!r}")
        if isinstance(sysno, str):
            names = {v: k for k, v in SYS_NAMES.items()}
            sysno = names[sysno.upper()]
        self._seq += 1
        self._regs[self._seq] = (owner, sysno, phase, callback)
        self._compiled.clear()
        return self._seq

    def unregister(self, hook_id: int) -> None:
        self._regs.pop(hook_id, None)
        self._compiled.clear()

    def _hooks(self, sysno: int, phase: str) -> tuple:
        key = (sysno, phase)
        hooks = self._compiled.get(key)
        if hooks is None:
            found = sorted((self.host.rank(owner), seq, cb)
                           for seq, (owner, n, ph, cb) in self._regs.items()
                           if ph == phase and (n is None or n == sysno))
            hooks = self._compiled[key] = tuple(cb for _, _, cb in found)
        return hooks

    def fire(self, t: Thread, sys_pc: int) -> int:
        engine = self.host.engine
        m = engine.machine
        regs = t.regs
        sysno = regs[0]
        before, after = self._hooks(sysno, "before"), self._hooks(sysno, "after")
        if not before and not after:
            return m.syscall(t, sys_pc)
        ev = ApiEvent(engine, t, sysno, sys_pc, list(regs[:4]))
        decision = None
        for cb in before:
            try:
                res = cb(ev)
            except Exception as exc:  # noqa: BLE001 - hooks never abort a run
                engine.log_error(f"api hook {cb!r} failed on syscall {sysno}: {exc!r}")
                continue
            if res is not None and decision is None:
                decision = res
        if decision is None:
            regs[1:4] = [a & 0xFFFFFFFF for a in ev.args[1:4]]
            out = m.syscall(t, sys_pc)
            ev.executed = True
        else:
            out = CONTINUE
            if isinstance(decision, Simulate):
                decision.apply(regs)
        ev.phase = "after"
        ev.results = list(regs[:4])
        for cb in after:
            try:
                cb(ev)
            except Exception as exc:  # noqa: BLE001
                engine.log_error(f"api hook {cb!r} failed on syscall {sysno}: {exc!r}")
        if ev.results != regs[:4]:
            regs[:4] = [r & 0xFFFFFFFF for r in ev.results]
        return out
