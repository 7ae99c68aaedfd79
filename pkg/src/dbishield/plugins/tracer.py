"""Instruction and API tracers built on the Logger."""

from __future__ import annotations

from ..engine.events import ApiEvent, InstrEvent
from ..isa import OpClass
from .host import Plugin, PluginHost
from .instrctl import select

_TRACED = [c for c in OpClass if c is not OpClass.CALLOUT]


class Tracer(Plugin):
    """Writes ``tid pc mnemonic`` to channel ``instr`` and syscalls to ``api``."""
    name = "Tracer"
    depends = ("InstrControl", "APIControl", "Logger")
    priority = 10

    def __init__(self, instructions: bool = True, api: bool = True):
        self.instructions = instructions
        self.api = api

    def init(self, host: PluginHost) -> None:
        self.log = host.get("Logger")
        if self.instructions:
            host.call("InstrControl.register", self, select(classes=_TRACED), "before",
                      self._on_instr)
        if self.api:
            host.call("APIControl.register", self, None, "before", self._on_api)

    def _on_instr(self, ev: InstrEvent) -> None:
        self.log.log_event("instr", f"{ev.tid} 0x{ev.addr:08X} {ev.instr.mnemonic}")

    def _on_api(self, ev: ApiEvent) -> None:
        self.log.log_event("api", f"{ev.tid} 0x{ev.pc:08X} SYS({ev.sysno})")


class NoopTracer(Plugin):
    """Observes every branch and syscall and does nothing with them."""
    name = "NoopTracer"
    depends = ("InstrControl", "APIControl")
    priority = 90

    def __init__(self) -> None:
        self.seen = 0

    def init(self, host: PluginHost) -> None:
        host.call("InstrControl.register", self, select(classes=["control"]), "before",
                  self._observe)
        host.call("APIControl.register", self, None, "after", self._observe)

    def _observe(self, ev) -> None:
        self.seen += 1
