"""ExceptionHandler: fetch checks at dispatch and guest-view exception records."""

from __future__ import annotations

from dataclasses import replace

from ..vm.machine import ExceptionRecord
from .host import Plugin, PluginHost


class ExceptionHandler(Plugin):
    name = "ExceptionHandler"
    priority = 0

    def __init__(self) -> None:
        self.host: PluginHost | None = None

    def exports(self):
        return {"translate_exception": self.translate_exception}

    def init(self, host: PluginHost) -> None:
        self.host = host
        engine = host.engine
        engine.enforce_fetch = True
        engine.exception_filters.append(self.translate)

    def translate(self, rec: ExceptionRecord) -> ExceptionRecord:
        engine = self.host.engine
        origin = "cache" if engine.in_arena(rec.pc) else "guest"
        return self.translate_exception(rec, origin)

    def translate_exception(self, rec: ExceptionRecord, origin: str = "cache") -> ExceptionRecord:
        lookup = self.host.engine.reverse_lookup
        pc, lastip = lookup(rec.pc), lookup(rec.lastip)
        if origin == "guest" and lastip == rec.lastip:
            return rec
        return replace(rec, pc=pc, lastip=lastip)
