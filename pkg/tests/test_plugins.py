import io
import itertools
import random

import pytest

from dbishield import corpus
from dbishield.asm import assemble, assemble_with_symbols
from dbishield.engine import (ARENA_HI, ARENA_LO, SKIP, Engine, EngineAbort, Simulate,
                              run_instrumented)
from dbishield.isa import OP_CLASS, Op, OpClass
from dbishield.plugins import (APIControl, Cycle, DuplicateName, ExceptionHandler,
                               InstrControl, InvalidSelector, Logger, MissingDependency,
                               NoopTracer, Plugin, PluginHost, Shield, SinkUnavailable,
                               Tracer, UnknownExport, resolve_order, select)
from dbishield.plugins.host import PluginDescriptor
from dbishield.vm.machine import ExceptionRecord
from dbishield.vm.reference import ReferenceRun, run_reference


def prog(body, data=""):
    return assemble(f".seg code\n.entry main\nmain:\n{body}\n.seg data\n{data}\n")


def exit_with(reg):
    return f"MOVrr R1, {reg}\nMOVri R0, 1\nSYS\n"


class Probe(Plugin):
    """Configurable test plugin: records what it sees in a shared log."""

    def __init__(self, name, priority=100, depends=(), setup=None):
        self.name, self.priority, self.depends = name, priority, tuple(depends)
        self.setup = setup
        self.log = []

    def exports(self):
        return {"echo": lambda *a: (self.name, a)}

    def init(self, host):
        if self.setup:
            self.setup(self, host)


# -- ordering -------------------------------------------------------------------
def oracle_order(descs):
    """Kahn's algorithm by exhaustive scan, ties by (priority, name)."""
    left = {d.name: d for d in descs}
    out = []
    while left:
        ready = [d for d in left.values() if all(x in out for x in d.depends)]
        pick = min(ready, key=lambda d: (d.priority, d.name))
        out.append(pick.name)
        del left[pick.name]
    return out


def test_shield_alone_missing_dependency():
    with pytest.raises(MissingDependency) as e:
        PluginHost([Shield()])
    assert e.value.missing == "APIControl"


def test_standard_stack_order_and_permutations():
    stack = [InstrControl, APIControl, Shield, Logger, Tracer]
    orders = set()
    for perm in itertools.permutations(stack):
        host = PluginHost([cls() for cls in perm])
        orders.add(tuple(p.name for p in host.order))
    assert len(orders) == 1
    order = list(orders.pop())
    assert order.index("Shield") > max(order.index("APIControl"), order.index("InstrControl"))
    assert order == oracle_order([cls().descriptor for cls in stack])


def test_random_graphs_match_oracle():
    rng = random.Random(5)
    for _ in range(200):
        n = rng.randrange(1, 8)
        names = [f"p{i}" for i in range(n)]
        descs = [PluginDescriptor(nm, depends=tuple(rng.sample(names[:i], rng.randrange(i + 1)))
                                  if i else (), priority=rng.randrange(3))
                 for i, nm in enumerate(names)]
        rng.shuffle(descs)
        assert resolve_order(descs) == oracle_order(descs)


def test_duplicate_and_cycle():
    with pytest.raises(DuplicateName):
        PluginHost([Probe("a"), Probe("a")])
    with pytest.raises(Cycle):
        PluginHost([Probe("a", depends=["b"]), Probe("b", depends=["a"])])


def test_registry_echo_round_trip():
    seen = {}

    def setup(self, host):
        seen["reply"] = host.call("b.echo", 1, "x")
    a, b = Probe("a", depends=["b"], setup=setup), Probe("b")
    host = PluginHost([a, b])
    host.attach(Engine())
    assert seen["reply"] == ("b", (1, "x"))
    with pytest.raises(UnknownExport):
        host.call("b.nothing")


# -- instruction hooks ----------------------------------------------------------------
def test_selector_validation():
    with pytest.raises(InvalidSelector):
        select(pattern="(")
    with pytest.raises(InvalidSelector):
        select()
    with pytest.raises(InvalidSelector):
        select(classes=["nonsense"])
    sel = select(opcodes=[Op.RDLIP], pattern="J.*")
    assert sel.matches_op(Op.RDLIP) and sel.matches_op(Op.JNZ)
    assert not sel.matches_op(Op.ADD)
    assert not select(pattern="J").matches_op(Op.JMP)    # anchored


def test_control_hook_counts_branches():
    img = corpus.load("sort")
    log = io.StringIO()
    ReferenceRun(img, instr_log=log).run()
    control = {op.name for op in Op if OP_CLASS[op] is OpClass.CONTROL}
    expected = sum(line.split()[2] in control for line in log.getvalue().splitlines())

    def setup(self, host):
        host.call("InstrControl.register", self, select(classes=["control"]), "before",
                  lambda ev: self.log.append(ev.addr))
    p = Probe("counter", depends=["InstrControl"], setup=setup)
    run_instrumented(img, [InstrControl(), p])
    assert len(p.log) == expected > 0


def test_two_plugins_fire_in_priority_order():
    order = []

    def make(tag):
        def setup(self, host):
            host.call("InstrControl.register", self, select(opcodes=["ADD"]), "before",
                      lambda ev: order.append(tag))
        return setup
    late = Probe("late", priority=50, depends=["InstrControl"], setup=make("late"))
    early = Probe("early", priority=5, depends=["InstrControl"], setup=make("early"))
    run_instrumented(prog("ADD R1, R2\nADD R1, R2\n" + exit_with("R1")),
                     [late, InstrControl(), early])
    assert order == ["early", "late", "early", "late"]


def test_instruction_skip_and_replace():
    def setup(self, host):
        host.call("InstrControl.register", self, select(opcodes=["ADDI"]), "before",
                  lambda ev: SKIP if ev.instr.imm == 1 else None)
        host.call("InstrControl.register", self, select(opcodes=["ADDI"]), "after",
                  lambda ev: self.log.append(ev.executed))
    p = Probe("skipper", depends=["InstrControl"], setup=setup)
    out = run_instrumented(prog("ADDI R1, 1\nADDI R1, 2\n" + exit_with("R1")),
                           [InstrControl(), p])
    assert out.trace.exit_code == 2
    assert p.log == [False, True]


def test_rdlip_substituted_by_shield():
    body = "ADD R1, R2\nRDLIP R3\n" + exit_with("R3")
    assert run_reference(prog(body)).exit_code == 0x400000
    assert run_instrumented(prog(body)).trace.exit_code >= 0xC0000000
    stack = [InstrControl(), APIControl(), Shield(groups=["context"])]
    assert run_instrumented(prog(body), stack).trace.exit_code == 0x400000


def test_registration_mid_run_flushes():
    def setup(self, host):
        def on_write(ev):
            if not self.log:
                host.call("InstrControl.register", self, select(opcodes=["NOP"]), "before",
                          lambda e: self.log.append(e.addr))
            self.log.append("write")
        host.call("APIControl.register", self, "WRITE", "after", on_write)
    p = Probe("late-reg", depends=["InstrControl", "APIControl"], setup=setup)
    body = ("loop:\nMOVri R0, 2\nLI R1, msg\nMOVri R2, 1\nSYS\nNOP\nADDI R5, 1\n"
            "CMPI R5, 3\nJNZ loop\n" + exit_with("R5"))
    out = run_instrumented(prog(body, 'msg: .ascii "x"'), [InstrControl(), APIControl(), p])
    assert out.metrics.flushes == 1
    assert p.log.count("write") == 3 and len(p.log) == 3 + 3


def test_hook_errors_are_logged_not_fatal():
    def boom(ev):
        raise RuntimeError("boom")

    def setup(self, host):
        host.call("InstrControl.register", self, select(classes=["alu"]), "before", boom)
        host.call("APIControl.register", self, None, "before", boom)
    p = Probe("faulty", depends=["InstrControl", "APIControl"], setup=setup)
    img = corpus.load("fib")
    e = Engine()
    host = PluginHost([InstrControl(), APIControl(), p])
    host.attach(e)
    e.load(img)
    out = e.run()
    assert out.trace.output == b"6765\n"
    assert e.errors and "boom" in e.errors[0]


# -- API hooks ------------------------------------------------------------------------
def test_write_without_hooks_is_raw():
    img = corpus.load("strrev")
    out = run_instrumented(img, [InstrControl(), APIControl()])
    assert out.trace.to_bytes() == run_reference(img).to_bytes()


def test_api_skip_first_decision_wins():
    def make(tag, r0):
        def setup(self, host):
            host.call("APIControl.register", self, "TIME", "before",
                      lambda ev: (self.log.append(tag), Simulate(r0=r0))[1])
            host.call("APIControl.register", self, "TIME", "after",
                      lambda ev: self.log.append((tag, ev.executed, ev.results[0])))
        return setup
    a = Probe("a", priority=1, depends=["APIControl"], setup=make("a", 111))
    b = Probe("b", priority=2, depends=["APIControl"], setup=make("b", 222))
    body = "MOVri R0, 3\nSYS\n" + exit_with("R0")
    out = run_instrumented(prog(body), [b, APIControl(), a])
    assert out.trace.exit_code == 111
    assert a.log == ["a", ("a", False, 111)]
    assert b.log == ["b", ("b", False, 111)]


def test_after_hook_modifies_results():
    def setup(self, host):
        def after(ev):
            ev.results[0] = 77
        host.call("APIControl.register", self, "GETPPID", "after", after)
    p = Probe("m", depends=["APIControl"], setup=setup)
    body = "MOVri R0, 14\nSYS\n" + exit_with("R0")
    assert run_instrumented(prog(body), [APIControl(), p]).trace.exit_code == 77


def test_tracer_records_call_shield_result_stands():
    img = corpus.load("timing_loop")
    log = Logger()
    stack = [InstrControl(), APIControl(), log, Tracer(instructions=False), Shield()]
    out = run_instrumented(img, stack)
    assert out.trace.output == b"CLEAN\n"
    assert sum("SYS(3)" in line for line in log.lines("api")) == 2


def test_shield_time_is_virtual_and_raw_counter_untouched():
    body = ("MOVri R0, 3\nSYS\nMOVrr R5, R0\n" + "ADD R1, R2\n" * 50 +
            "MOVri R0, 3\nSYS\nSUB R0, R5\n" + exit_with("R0"))
    ref = run_reference(prog(body)).exit_code
    e = Engine()
    host = PluginHost([InstrControl(), APIControl(), Shield(groups=["time"])])
    host.attach(e)
    e.load(prog(body))
    out = e.run()
    assert out.trace.exit_code == ref
    assert e.machine.cycles > e.virtual


# -- exceptions -----------------------------------------------------------------------
def test_fault_pc_reverse_mapped():
    body = ("LI R1, h\nMOVri R0, 9\nSYS\nMOVri R2, 0\nfault:\nDIV R1, R2\n"
            "h:\nLD R2, [R1+8]\n" + exit_with("R2"))
    src = f".seg code\n.entry main\nmain:\n{body}\n"
    ref = run_reference(prog(body)).exit_code
    assert ref == assemble_with_symbols(src).symbols["fault"]
    bare = run_instrumented(prog(body)).trace.exit_code
    assert bare != ref
    assert run_instrumented(prog(body), [ExceptionHandler()]).trace.exit_code == ref


def test_guest_origin_record_unchanged():
    e = Engine()
    eh = ExceptionHandler()
    PluginHost([eh]).attach(e)
    e.load(prog("NOP"))
    rec = ExceptionRecord(5, 0x600000, 0x400010, 0, (0,) * 8, 0x400008)
    assert eh.translate_exception(rec, "guest") is rec


@pytest.mark.parametrize("name", ["page_guard_single", "page_guard_multi"])
def test_guard_parity_with_instrumentation(name):
    img = corpus.load(name)
    stack = [InstrControl(), APIControl(), ExceptionHandler(), Logger(), Tracer()]
    assert run_instrumented(img, stack).trace.to_bytes() == run_reference(img).to_bytes()


# -- logger ----------------------------------------------------------------------------
def test_instruction_channel_matches_reference_count():
    img = corpus.load("fib")
    ref_log = io.StringIO()
    ReferenceRun(img, instr_log=ref_log).run()
    log = Logger()
    run_instrumented(img, [InstrControl(), APIControl(), log, Tracer()])
    assert len(log.lines("instr")) == len(ref_log.getvalue().splitlines())


def test_logging_disabled_writes_nothing(tmp_path):
    log = Logger(enabled=False, directory=tmp_path)
    run_instrumented(corpus.load("fib"), [InstrControl(), APIControl(), log, Tracer()])
    assert log.lines("instr") == []
    assert sum(f.stat().st_size for f in tmp_path.iterdir()) == 0


def test_channels_individually_ordered(tmp_path):
    log = Logger(directory=tmp_path)
    run_instrumented(corpus.load("threaded_sum"), [InstrControl(), APIControl(), log, Tracer()])
    log.close()
    for ch in ("instr", "api"):
        lines = (tmp_path / f"{ch}.log").read_text().splitlines()
        assert [int(line.split()[0]) for line in lines] == list(range(len(lines)))


def test_sink_unavailable(tmp_path):
    with pytest.raises(SinkUnavailable):
        Logger().open_trace("x", tmp_path / "missing" / "x.log")


def test_observe_only_stack_is_transparent():
    for name in corpus.names():
        try:
            bare = run_instrumented(corpus.load(name)).trace
        except EngineAbort:
            continue
        stack = [InstrControl(), APIControl(), Logger(), Tracer(), NoopTracer()]
        out = run_instrumented(corpus.load(name), stack).trace
        assert (out.output, out.exit_code, out.cycles) == (
            bare.output, bare.exit_code, bare.cycles), name
        # hooks move blocks inside the arena, so only a leaked arena address may differ
        for a, b in zip(out.regs, bare.regs):
            assert a == b or ARENA_LO <= a < ARENA_HI and ARENA_LO <= b < ARENA_HI, name
