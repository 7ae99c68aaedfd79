"""Guest virtual machine: memory, threads, syscalls and native execution."""

from .machine import (BLOCKED, CONTINUE, EXITED, FAULTED, YIELDED, CycleLimitExceeded,
                      Deadlock, ExceptionRecord, Limits, Machine, MemoryLimitExceeded,
                      ObservableTrace, RunLimitError, SYS_NAMES, SYS_NUMBERS, Thread, load)
from .memory import (DIV_ZERO, FAULT_EXEC_NX, FAULT_EXEC_UNMAPPED, FAULT_READ,
                     FAULT_WRITE, GUARD_HIT, ILLEGAL_OPCODE, RAISED, AddressSpace,
                     MapConflict, MemFault)
from .reference import ReferenceRun, run_reference

__all__ = [
    "BLOCKED", "CONTINUE", "EXITED", "FAULTED", "YIELDED", "CycleLimitExceeded",
    "Deadlock", "ExceptionRecord", "Limits", "Machine", "MemoryLimitExceeded",
    "ObservableTrace", "RunLimitError", "SYS_NAMES", "SYS_NUMBERS", "Thread", "load",
    "DIV_ZERO", "FAULT_EXEC_NX", "FAULT_EXEC_UNMAPPED", "FAULT_READ", "FAULT_WRITE",
    "GUARD_HIT", "ILLEGAL_OPCODE", "RAISED", "AddressSpace", "MapConflict", "MemFault",
    "ReferenceRun", "run_reference",
]
