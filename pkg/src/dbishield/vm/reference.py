"""Native (uninstrumented) execution: the observational oracle."""

from __future__ import annotations

from typing import TextIO

from ..image import Image
from .machine import (CONTINUE, FAULTED, CycleLimitExceeded, Limits, Machine,
                      ObservableTrace, Thread)


class ReferenceRun:
    def __init__(self, img: Image, limits: Limits | None = None, name: str = "main",
                 instr_log: TextIO | None = None, record_clock: bool = False):
        self.machine = Machine(img, name=name, limits=limits, instr_log=instr_log)
        if record_clock:
            self.machine.sys_clock = []

    def _slice(self, t: Thread) -> int:
        m = self.machine
        step = m.step
        cap = m.limits.max_cycles
        while True:
            r = step(t)
            if r != CONTINUE:
                if r == FAULTED:
                    m.deliver_exception(t, t.fault)
                m.check_limits()
                return r
            if m.cycles > cap:
                raise CycleLimitExceeded(f"cycle limit {cap} exceeded")

    def run(self) -> ObservableTrace:
        self.machine.run(self._slice)
        return self.machine.trace()


def run_reference(img: Image, limits: Limits | None = None, name: str = "main",
                  instr_log: TextIO | None = None) -> ObservableTrace:
    return ReferenceRun(img, limits, name, instr_log).run()
