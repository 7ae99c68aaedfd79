"""Run corpus programs natively and under engine modes, classify the outcome."""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .. import corpus
from ..engine import EngineAbort, run_instrumented
from ..vm.machine import Limits, ObservableTrace, RunLimitError
from ..vm.reference import ReferenceRun
from .config import NATIVE, BenchConfig, Mode

PASSED = "PASSED"
FAILED = "FAILED"
ERROR = "ERROR"
VERDICTS = (PASSED, FAILED, ERROR)

CLEAN = b"CLEAN\n"
DETECTED = b"DETECTED\n"


@dataclass
class RunResult:
    test: str
    mode: str
    verdict: str
    reason: str = ""
    output_digest: str = ""
    exit_code: int | None = None
    reference_cycles: int = 0
    real_cycles: int = 0
    virtual_cycles: int = 0
    blocks_translated: int = 0
    arena_pages: int = 0
    clock_match: bool | None = None
    trace: ObservableTrace | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "test": self.test, "mode": self.mode, "verdict": self.verdict,
            "reason": self.reason, "output_digest": self.output_digest,
            "exit_code": self.exit_code, "reference_cycles": self.reference_cycles,
            "real_cycles": self.real_cycles, "virtual_cycles": self.virtual_cycles,
            "blocks_translated": self.blocks_translated, "arena_pages": self.arena_pages,
            "clock_match": self.clock_match,
        }


def classify(trace: ObservableTrace | None, error: BaseException | None = None) -> tuple[str, str]:
    """Verdict for an attack run: (verdict, reason)."""
    if error is not None:
        return ERROR, f"{type(error).__name__}: {error}"
    if trace.output == CLEAN and trace.exit_code == 0:
        return PASSED, ""
    if trace.output == DETECTED:
        return FAILED, ""
    return ERROR, f"unexpected output {trace.output[:40]!r} exit {trace.exit_code}"


def classify_benign(trace: ObservableTrace | None, ref: ObservableTrace,
                    error: BaseException | None = None) -> tuple[str, str]:
    """Benign programs pass when they behave exactly as they do natively."""
    if error is not None:
        return ERROR, f"{type(error).__name__}: {error}"
    if trace.same_behaviour(ref):
        return PASSED, ""
    return FAILED, "observable behaviour differs from native"


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class Reference:
    trace: ObservableTrace
    sys_clock: list[int]


def reference(test: str, limits: Limits | None = None) -> Reference:
    run = ReferenceRun(corpus.load(test), limits, name=test, record_clock=True)
    trace = run.run()
    return Reference(trace, list(run.machine.sys_clock))


def run_one(test: str, mode: Mode | str, limits: Limits | None = None,
            ref: Reference | None = None) -> RunResult:
    """Run ``test`` once under ``mode`` in a fresh machine. Never raises for guest
    or engine failures; those become ERROR verdicts."""
    spec = corpus.manifest()[test]
    limits = limits or Limits()
    mode_name = mode if isinstance(mode, str) else mode.name
    if ref is None:
        try:
            ref = reference(test, limits)
        except RunLimitError as e:
            return RunResult(test, mode_name, ERROR, f"native run: {type(e).__name__}: {e}")
    res = RunResult(test, mode_name, ERROR, reference_cycles=ref.trace.cycles)

    trace = err = None
    if mode_name == NATIVE:
        trace = ref.trace
        res.real_cycles = res.virtual_cycles = trace.cycles
        res.clock_match = True
    else:
        try:
            out = run_instrumented(corpus.load(test), mode.build_plugins(),
                                   mode.engine_config(), limits, name=test)
        except (EngineAbort, RunLimitError) as e:
            err = e
        except Exception as e:      # engine bug: still a verdict, never a crash
            err = e
        else:
            trace = out.trace
            res.real_cycles = out.metrics.real_cycles
            res.virtual_cycles = out.metrics.virtual_cycles
            res.blocks_translated = out.metrics.blocks_translated
            res.arena_pages = out.metrics.arena_pages
            res.clock_match = out.sys_clock == ref.sys_clock

    if spec.is_attack:
        res.verdict, res.reason = classify(trace, err)
    else:
        res.verdict, res.reason = classify_benign(trace, ref.trace, err)
    if trace is not None:
        res.trace = trace
        res.output_digest = digest(trace.output)
        res.exit_code = trace.exit_code
    return res


def _run_test(args: tuple[str, list[Mode], Limits]) -> list[RunResult]:
    test, modes, limits = args
    try:
        ref = reference(test, limits)
    except RunLimitError as e:
        why = f"native run: {type(e).__name__}: {e}"
        return [RunResult(test, m, ERROR, why) for m in [NATIVE] + [m.name for m in modes]]
    out = [run_one(test, NATIVE, limits, ref)]
    out += [run_one(test, m, limits, ref) for m in modes]
    for r in out:
        r.trace = None
    return out


def run_results(config: BenchConfig) -> list[RunResult]:
    """The tests x modes cross product, ordered by (mode, test)."""
    config.validate()
    tests = config.tests if config.tests is not None else corpus.names()
    work = [(t, config.modes, config.limits) for t in tests]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            chunks = list(pool.map(_run_test, work))
    else:
        chunks = [_run_test(w) for w in work]
    order = {NATIVE: 0, **{m.name: i + 1 for i, m in enumerate(config.modes)}}
    flat = [r for chunk in chunks for r in chunk]
    flat.sort(key=lambda r: (order[r.mode], r.test))
    return flat
