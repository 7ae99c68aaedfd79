import json

import jsonschema
import pytest

from dbishield import corpus
from dbishield.bench import (ERROR, FAILED, FIXED_TIMESTAMP, NATIVE, PASSED, STANDARD_MODES,
                             BenchConfig, ConfigError, Mode, config_from_dict, dumps,
                             format_summary, load_config, read_report, run_matrix, run_one,
                             run_results, summarize, unmet_thresholds, verdict_vector,
                             write_report)
from dbishield.bench.report import schema
from dbishield.bench.runner import classify, classify_benign
from dbishield.engine import EngineAbort
from dbishield.vm.machine import CycleLimitExceeded, Limits, ObservableTrace

SUBSET = ["cache_scan", "ctx_leak", "illegal_opcode", "lib_hooks", "fib", "exc_flow"]
REGS = (0,) * 8


def trace(out, code=0, regs=REGS):
    return ObservableTrace(out, code, regs, 10)


def small_config(**kw):
    modes = [STANDARD_MODES[n] for n in ("bare", "shield", "full", "detour")]
    return BenchConfig(modes=modes, tests=SUBSET, **kw)


@pytest.fixture(scope="module")
def doc():
    return run_matrix(small_config())


def test_classify_table():
    assert classify(trace(b"CLEAN\n")) == (PASSED, "")
    assert classify(trace(b"DETECTED\n", 1)) == (FAILED, "")
    assert classify(None, EngineAbort("boom"))[0] == ERROR
    assert classify(None, CycleLimitExceeded("spin"))[0] == ERROR
    assert classify(trace(b"CLEAN\n", 3))[0] == ERROR
    v, why = classify(trace(b"garbage"))
    assert v == ERROR and "garbage" in why


def test_classify_benign():
    ref = trace(b"1\n")
    assert classify_benign(trace(b"1\n"), ref)[0] == PASSED
    assert classify_benign(trace(b"2\n"), ref)[0] == FAILED
    assert classify_benign(trace(b"1\n", regs=(1,) + REGS[1:]), ref)[0] == FAILED
    assert classify_benign(None, ref, EngineAbort("x"))[0] == ERROR


def test_run_one_examples():
    assert run_one("cache_scan", STANDARD_MODES["full"]).verdict == PASSED
    assert run_one("cache_scan", STANDARD_MODES["bare"]).verdict == FAILED
    r = run_one("illegal_opcode", STANDARD_MODES["shield"])
    assert r.verdict == ERROR and r.reason.startswith("EngineAbort")
    assert run_one("cache_scan", NATIVE).verdict == PASSED


def test_run_one_metrics():
    r = run_one("fib", STANDARD_MODES["full"])
    assert r.verdict == PASSED and r.clock_match
    assert r.virtual_cycles == r.reference_cycles
    assert r.real_cycles > r.virtual_cycles
    assert r.blocks_translated > 0 and r.arena_pages > 0
    assert len(r.output_digest) == 64


def test_limit_errors_fold_into_error():
    tiny = Limits(max_cycles=50)
    r = run_one("fib", STANDARD_MODES["full"], tiny)
    assert r.verdict == ERROR and "CycleLimitExceeded" in r.reason
    rs = run_results(BenchConfig(modes=[STANDARD_MODES["bare"]], tests=["fib"], limits=tiny))
    assert [(x.mode, x.verdict) for x in rs] == [(NATIVE, ERROR), ("bare", ERROR)]


@pytest.mark.parametrize("doc_in, msg", [
    ({"modes": [{"name": "m", "plugins": ["nope"]}]}, "unknown plugins"),
    ({"modes": [{"name": "m", "plugins": ["shield"], "groups": ["cpu"]}]}, "shield groups"),
    ({"modes": [{"name": "m", "groups": ["time"]}]}, "without the shield"),
    ({"modes": ["bare", "bare"]}, "duplicate"),
    ({"modes": [{"name": "native"}]}, "duplicate"),
    ({"modes": ["warp"]}, "unknown standard mode"),
    ({"modes": [{"name": "m", "api_hook_mode": "inline"}]}, "api_hook_mode"),
    ({"modes": [{"name": "m", "disasm": "x"}]}, "disasm"),
    ({"modes": [{"name": "m", "engine": False, "plugins": ["logger"]}]}, "need the engine"),
    ({"modes": [{"name": "m", "colour": 1}]}, "bad mode"),
    ({"tests": ["fib", "nope"]}, "unknown tests"),
    ({"limits": {"max_cycles": 1, "bogus": 2}}, "bad limits"),
    ({"jobs": 0}, "jobs"),
    ({"min_pass_rate": {"ghost": 0.5}}, "unknown mode"),
    ({"colour": 1}, "unknown config keys"),
])
def test_config_errors(doc_in, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(doc_in)


def test_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"modes": ["bare", {"name": "x", "plugins": ["logger"]}],
                             "tests": ["fib"], "min_pass_rate": {"bare": 0.1}}))
    cfg = load_config(p)
    assert [m.name for m in cfg.modes] == ["bare", "x"]
    assert cfg.timestamp == FIXED_TIMESTAMP
    assert cfg.modes[1] == Mode("x", plugins=("logger",))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_mode_dict_round_trip():
    for m in STANDARD_MODES.values():
        assert config_from_dict({"modes": [m.to_dict()]}).modes == [m]


def test_report_matches_schema(doc):
    jsonschema.validate(doc, schema())
    jsonschema.validate(json.loads(dumps(doc)), schema())


def test_report_completeness(doc):
    assert list(doc["results"]) == [NATIVE, "bare", "shield", "full", "detour"]
    for rows in doc["results"].values():
        assert [r["test"] for r in rows] == sorted(SUBSET)


def test_summary_arithmetic(doc):
    m = corpus.manifest()
    for mode, rows in doc["results"].items():
        s = doc["summary"][mode]
        attacks = [r for r in rows if m[r["test"]].is_attack]
        assert s["attacks"] == len(attacks)
        assert s["benign"] == len(rows) - len(attacks)
        for v in (PASSED, FAILED, ERROR):
            assert s[v] == sum(r["verdict"] == v for r in attacks)
            assert s["rates"][v] == pytest.approx(s[v] / s["attacks"], abs=1e-6)
        assert sum(s["rates"].values()) == pytest.approx(1.0, abs=1e-9)


def test_summary_values(doc):
    s = doc["summary"]
    assert s[NATIVE]["rates"][PASSED] == 1.0
    assert s["full"]["rates"][PASSED] == 1.0
    assert s["bare"][ERROR] == 1 and s["bare"][FAILED] == 2
    assert verdict_vector(doc, "detour") == [
        ("cache_scan", PASSED), ("ctx_leak", PASSED), ("exc_flow", PASSED),
        ("fib", PASSED), ("illegal_opcode", PASSED), ("lib_hooks", FAILED)]


def test_serialization_deterministic(tmp_path, doc):
    again = run_matrix(small_config(jobs=2))
    assert dumps(again) == dumps(doc)
    write_report(doc, tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == doc
    assert (tmp_path / "r.json").read_text() == dumps(doc)


def test_summarize_empty():
    assert summarize([]) == {}


def test_unmet_thresholds(doc):
    cfg = small_config(min_pass_rate={"full": 0.95, "bare": 0.9})
    unmet = unmet_thresholds(doc, cfg)
    assert len(unmet) == 1 and unmet[0].startswith("bare")


def test_format_summary(doc):
    text = format_summary(doc)
    lines = text.splitlines()
    assert lines[0].split()[:4] == ["mode", "pass", "fail", "error"]
    full = next(x for x in lines if x.startswith("full "))
    assert "100.0%" in full and "2/2" in full and "#" * 30 in full
    assert lines[-1] == "(4 attacks, 2 benign programs)"
