"""InstrControl: instruction callbacks compiled into translated blocks."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ..isa import OP_CLASS, Instruction, Op, OpClass
from .host import Plugin, PluginHost


class InvalidSelector(ValueError):
    pass


def _as_op(v) -> Op:
    if isinstance(v, Op):
        return v
    if isinstance(v, int):
        return Op(v)
    for op in Op:
        if op.name.upper() == str(v).upper():
            return op
    raise ValueError(v)


@dataclass(frozen=True)
class InstrSelector:
    """Union of an opcode set, a class set and an anchored mnemonic regex."""
    opcodes: frozenset = field(default_factory=frozenset)
    classes: frozenset = field(default_factory=frozenset)
    pattern: str | None = None

    def __post_init__(self) -> None:
        try:
            ops = frozenset(_as_op(o) for o in self.opcodes)
            classes = frozenset(OpClass(c) for c in self.classes)
        except ValueError as exc:
            raise InvalidSelector(f"unknown opcode or class: {exc}") from None
        if self.pattern is not None:
            try:
                regex = re.compile(self.pattern)
            except re.error as exc:
                raise InvalidSelector(f"bad mnemonic pattern {self.pattern!r}: {exc}") from None
        else:
            regex = None
        if not ops and not classes and regex is None:
            raise InvalidSelector("empty selector")
        object.__setattr__(self, "opcodes", ops)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "_regex", regex)

    def matches_op(self, op: Op) -> bool:
        if op in self.opcodes or OP_CLASS[op] in self.classes:
            return True
        return self._regex is not None and self._regex.fullmatch(op.name) is not None

    def matches(self, ins: Instruction) -> bool:
        return self.matches_op(ins.op)


def select(opcodes: Iterable = (), classes: Iterable = (), pattern: str | None = None
           ) -> InstrSelector:
    return InstrSelector(frozenset(opcodes), frozenset(classes), pattern)


class InstrControl(Plugin):
    name = "InstrControl"
    priority = 0

    def __init__(self) -> None:
        self._regs: dict[int, tuple] = {}
        self._seq = 0
        self._compiled: dict[tuple[Op, str], tuple] = {}
        self.host: PluginHost | None = None

    def exports(self):
        return {"register": self.register, "unregister": self.unregister}

    def init(self, host: PluginHost) -> None:
        self.host = host
        host.engine.instr_hooks = self.hooks_for

    def register(self, owner, selector: InstrSelector, phase: str,
                 callback: Callable) -> int:
        if phase not in ("before", "after"):
            raise ValueError(f"phase must be 'before' or 'after', not {phase!r}")
        if not isinstance(selector, InstrSelector):
            raise InvalidSelector(f"not a selector: {selector!r}")
        self._seq += 1
        self._regs[self._seq] = (owner, selector, phase, callback)
        self._changed()
        return self._seq

    def unregister(self, hook_id: int) -> None:
        if self._regs.pop(hook_id, None) is not None:
            self._changed()

    def _changed(self) -> None:
        self._compiled.clear()
        if self.host is not None and self.host.engine is not None:
            self.host.engine.request_flush()

    def hooks_for(self, ins: Instruction, phase: str) -> tuple:
        key = (ins.op, phase)
        hooks = self._compiled.get(key)
        if hooks is None:
            rank = self.host.rank if self.host is not None else (lambda o: (100, str(o)))
            found = sorted((rank(owner), seq, cb)
                           for seq, (owner, sel, ph, cb) in self._regs.items()
                           if ph == phase and sel.matches_op(ins.op))
            hooks = self._compiled[key] = tuple(cb for _, _, cb in found)
        return hooks
