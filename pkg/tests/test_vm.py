import io

import pytest

from dbishield import corpus
from dbishield.asm import assemble
from dbishield.image import PAGE
from dbishield.isa import Op, OPCODE_COST
from dbishield.vm.machine import CONTINUE, FAULTED, CycleLimitExceeded, Limits, Machine
from dbishield.vm.memory import (DIV_ZERO, FAULT_EXEC_NX, FAULT_EXEC_UNMAPPED, FAULT_WRITE,
                                 ILLEGAL_OPCODE, RAISED)
from dbishield.vm.reference import ReferenceRun, run_reference

EXIT = "MOVrr R1, {r}\nMOVri R0, 1\nSYS\n"


def prog(body, data=""):
    return assemble(f".seg code\n.entry main\nmain:\n{body}\n.seg data\n{data}\n")


def run(body, data="", **kw):
    return run_reference(prog(body, data), **kw)


def test_load_state():
    m = Machine(prog("NOP"))
    t = m.threads[0]
    assert list(m.threads) == [0] and t.status == "runnable"
    assert t.pc == 0x400000 and t.regs[7] == 0x7FF00000
    assert m.mem.region(0x7FF00000 - 16 * PAGE) is not None
    assert Machine(prog("NOP")).mem.committed == m.mem.committed


def test_add_step():
    m = Machine(prog("MOVri R1, 2\nMOVri R2, 3\nADD R1, R2"))
    t = m.threads[0]
    for _ in range(3):
        assert m.step(t) == CONTINUE
    assert t.regs[1] == 5 and not t.flags & 1
    assert t.lastip == 0x400008
    assert m.cycles == 3


def test_div_zero_record():
    m = Machine(prog("MOVri R1, 4\nDIV R1, R2"))
    t = m.threads[0]
    m.step(t)
    assert m.step(t) == FAULTED
    assert (t.fault.code, t.fault.pc) == (DIV_ZERO, 0x400004)


def test_div_zero_exit_code():
    assert run("MOVri R1, 4\nDIV R1, R2").exit_code == 135


def test_fetch_unmapped():
    m = Machine(prog("LI R1, 0x1000\nJMPR R1"))
    t = m.threads[0]
    while m.step(t) == CONTINUE:
        pass
    assert (t.fault.code, t.fault.fault_addr, t.fault.pc) == (
        FAULT_EXEC_UNMAPPED, 0x1000, 0x1000)


def test_entry_in_nx_segment():
    img = prog("NOP")
    img.segments[0].perms = 3
    m = Machine(img)
    assert m.step(m.threads[0]) == FAULTED
    assert m.threads[0].fault.code == FAULT_EXEC_NX


def test_undefined_opcode_faults():
    m = Machine(prog(".word 0"))
    assert m.step(m.threads[0]) == FAULTED
    assert m.threads[0].fault.code == ILLEGAL_OPCODE


def test_time_delta_1010():
    body = ("MOVri R0, 3\nSYS\nMOVrr R5, R0\n" + "ADD R1, R2\n" * 1000 +
            "MOVri R0, 3\nSYS\nSUB R0, R5\n" + EXIT.format(r="R0"))
    # the sample bookkeeping (MOVrr, MOVri) is charged on top of ADDs and SYS
    expected = (1000 * OPCODE_COST[Op.ADD] + OPCODE_COST[Op.MOVrr]
                + OPCODE_COST[Op.MOVri] + 10)
    assert expected == 1012
    assert run(body).exit_code == expected


def test_back_to_back_time():
    body = "MOVri R0, 3\nSYS\nMOVrr R5, R0\nMOVri R0, 3\nSYS\nSUB R0, R5\n" + EXIT.format(r="R0")
    assert run(body).exit_code == 10 + 2


def test_alloc_memstats():
    body = ("MOVri R0, 20\nSYS\nMOVrr R5, R0\n"
            "MOVri R0, 4\nMOVri R1, 2\nMOVri R2, 3\nSYS\n"
            "MOVri R0, 20\nSYS\nSUB R0, R5\n" + EXIT.format(r="R0"))
    assert run(body).exit_code == 2


def test_free_unknown():
    body = "MOVri R0, 5\nLI R1, 0x20000000\nSYS\n" + EXIT.format(r="R0")
    assert run(body).exit_code == 1


def test_unknown_syscall_enosys():
    body = "MOVri R0, 99\nSYS\n" + EXIT.format(r="R0")
    assert run(body).exit_code == 0xFFFFFFFF


def test_handler_entered_with_frame():
    body = ("LI R1, h\nMOVri R0, 9\nSYS\nMOVri R0, 11\nMOVri R1, 8\nSYS\n"
            + EXIT.format(r="R0") + "h:\nLD R2, [R1]\n" + EXIT.format(r="R1"))
    m = ReferenceRun(prog(body))
    tr = m.run()
    assert tr.exit_code == 0x7F000000
    assert m.machine.mem.peek32(0x7F000000) == RAISED


def test_resume_at_modified_pc():
    body = ("LI R1, h\nMOVri R0, 9\nSYS\nMOVri R1, 0\nDIV R1, R1\n"
            "MOVri R1, 1\n" + EXIT.format(r="R1") +
            "skip:\n" + "MOVri R1, 7\n" + EXIT.format(r="R1") +
            "h:\nLI R2, skip\nST [R1+8], R2\nMOVri R0, 10\nSYS\n")
    assert run(body).exit_code == 7


def test_nested_fault_terminates():
    body = "LI R1, h\nMOVri R0, 9\nSYS\nDIV R1, R2\nh:\nDIV R1, R2\n"
    assert run(body).exit_code == 128 + DIV_ZERO


def test_guard_one_shot():
    body = ("MOVri R0, 4\nMOVri R1, 1\nMOVri R2, 3\nSYS\nMOVrr R6, R0\n"
            "LI R1, h\nMOVri R0, 9\nSYS\n"
            "MOVri R0, 8\nMOVrr R1, R6\nSYS\n"
            "ST [R6], R6\nST [R6], R6\nMOVri R1, 9\n" + EXIT.format(r="R1") +
            "h:\nLD R1, [R1]\nMOVri R0, 10\nLI R1, 0x7F000000\nSYS\n")
    # handler resumes at the faulting store, which then succeeds
    tr = run(body)
    assert tr.exit_code == 9


def test_store_to_readonly_faults():
    body = "LI R1, main\nST [R1], R1\n"
    assert run(body).exit_code == 128 + FAULT_WRITE


def test_cycle_limit():
    with pytest.raises(CycleLimitExceeded):
        run("loop: JMP loop", limits=Limits(max_cycles=1000))


def test_alloc_refused_at_page_limit():
    body = ("MOVri R5, 0\nagain:\nMOVri R0, 4\nMOVri R1, 64\nMOVri R2, 3\nSYS\n"
            "CMPI R0, 0\nJZ done\nADDI R5, 1\nJMP again\ndone:\n" + EXIT.format(r="R5"))
    base = Machine(prog("NOP")).mem.committed
    assert run(body, limits=Limits(max_pages=512)).exit_code == (512 - base) // 64


def test_fib():
    tr = run_reference(corpus.load("fib"))
    assert (tr.output, tr.exit_code) == (b"6765\n", 0)


def test_smc_jit_prints_patched_value():
    tr = run_reference(corpus.load("smc_jit"))
    assert (tr.output, tr.exit_code) == (b"60\n310\n", 0)


def test_determinism():
    img = corpus.load("threaded_sum")
    assert run_reference(img).to_bytes() == run_reference(img).to_bytes()


@pytest.mark.parametrize("name", ["fib", "sort", "threaded_sum", "exc_flow"])
def test_cycles_equal_instruction_log(name):
    log = io.StringIO()
    tr = ReferenceRun(corpus.load(name), instr_log=log).run()
    total = 0
    for line in log.getvalue().splitlines():
        mnem = line.split()[2]
        total += 10 if mnem.startswith("SYS") else OPCODE_COST[Op[mnem]]
    assert total == tr.cycles
