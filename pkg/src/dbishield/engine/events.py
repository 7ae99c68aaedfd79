"""Event objects handed to instrumentation callbacks, and their decisions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from ..isa import Instruction

if TYPE_CHECKING:
    from ..vm.machine import Machine, Thread
    from .engine import Engine


class _Skip:
    __slots__ = ()

    def __repr__(self) -> str:
        return "SKIP"


SKIP = _Skip()


@dataclass
class Simulate:
    """Decision from an API before-hook: do not run the syscall; install
    these result registers (R0..R3, ``None`` leaves a register alone)."""
    r0: int | None = None
    r1: int | None = None
    r2: int | None = None
    r3: int | None = None

    def apply(self, regs: list[int]) -> None:
        for i, v in enumerate((self.r0, self.r1, self.r2, self.r3)):
            if v is not None:
                regs[i] = v & 0xFFFFFFFF


@dataclass
class InstrEvent:
    engine: "Engine"
    thread: "Thread"
    addr: int
    instr: Instruction
    phase: str
    executed: bool = False

    @property
    def tid(self) -> int:
        return self.thread.tid

    @property
    def machine(self) -> "Machine":
        return self.engine.machine


@dataclass
class ApiEvent:
    engine: "Engine"
    thread: "Thread"
    sysno: int
    pc: int
    args: list[int]
    phase: str = "before"
    executed: bool = False
    results: list[int] = field(default_factory=list)
    data: dict[str, Any] = field(default_factory=dict)

    @property
    def tid(self) -> int:
        return self.thread.tid

    @property
    def machine(self) -> "Machine":
        return self.engine.machine
