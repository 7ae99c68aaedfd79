"""Matrix report: canonical JSON document and a text rate table."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .. import corpus
from .config import NATIVE, BenchConfig
from .runner import ERROR, FAILED, PASSED, RunResult, run_results

REPORT_VERSION = 1
RATE_DIGITS = 6


def _rate(n: int, total: int) -> float:
    return round(n / total, RATE_DIGITS) if total else 0.0


def summarize(results: list[RunResult]) -> dict[str, dict]:
    """Per-mode verdict counts over attacks, plus benign fidelity."""
    spec = corpus.manifest()
    out: dict[str, dict] = {}
    for r in results:
        s = out.setdefault(r.mode, {"attacks": 0, PASSED: 0, FAILED: 0, ERROR: 0,
                                    "benign": 0, "benign_identical": 0,
                                    "clock_mismatches": 0})
        if r.clock_match is False:
            s["clock_mismatches"] += 1
        if spec[r.test].is_attack:
            s["attacks"] += 1
            s[r.verdict] += 1
        else:
            s["benign"] += 1
            s["benign_identical"] += r.verdict == PASSED
    for s in out.values():
        n = s["attacks"]
        p, f = _rate(s[PASSED], n), _rate(s[FAILED], n)
        # the error share absorbs rounding so the three rates always sum to 1
        s["rates"] = {PASSED: p, FAILED: f,
                      ERROR: round(1.0 - p - f, RATE_DIGITS) if n else 0.0}
    return out


def build_report(config: BenchConfig, results: list[RunResult]) -> dict:
    by_mode: dict[str, list[dict]] = {}
    for r in results:
        by_mode.setdefault(r.mode, []).append(r.to_dict())
    return {
        "version": REPORT_VERSION,
        "timestamp": config.timestamp,
        "config": config.to_dict(),
        "results": by_mode,
        "summary": summarize(results),
    }


def run_matrix(config: BenchConfig) -> dict:
    return build_report(config, run_results(config))


def dumps(doc: dict) -> str:
    """Canonical serialization: identical documents give identical bytes."""
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=True,
                      allow_nan=False) + "\n"


def write_report(doc: dict, path: str | Path) -> None:
    Path(path).write_bytes(dumps(doc).encode("ascii"))


@lru_cache(maxsize=None)
def schema() -> dict:
    """JSON Schema of the report document."""
    return json.loads((resources.files(__package__) / "report.schema.json").read_text("utf-8"))


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="ascii"))


def unmet_thresholds(doc: dict, config: BenchConfig) -> list[str]:
    bad = []
    for mode, want in sorted(config.min_pass_rate.items()):
        s = doc["summary"].get(mode)
        got = s["rates"][PASSED] if s else 0.0
        if got < want:
            bad.append(f"{mode}: pass rate {got:.3f} < {want:.3f}")
    return bad


def verdict_vector(doc: dict, mode: str) -> list[tuple[str, str]]:
    return [(r["test"], r["verdict"]) for r in doc["results"][mode]]


def format_summary(doc: dict, width: int = 30) -> str:
    """Rate table, one row per mode, with a bar for the pass share."""
    summary = doc["summary"]
    order = [NATIVE] + [m["name"] for m in doc["config"]["modes"]]
    modes = [m for m in order if m in doc["results"]]
    name_w = max(len(m) for m in modes + ["mode"])
    head = (f"{'mode':<{name_w}}  {'pass':>6} {'fail':>6} {'error':>6}  "
            f"{'benign':>7}  clock")
    lines = [head, "-" * len(head)]
    for m in modes:
        s = summary[m]
        r = s["rates"]
        bar = "#" * round(r[PASSED] * width)
        benign = f"{s['benign_identical']}/{s['benign']}"
        clock = "ok" if not s["clock_mismatches"] else f"{s['clock_mismatches']} off"
        lines.append(f"{m:<{name_w}}  {r[PASSED]:6.1%} {r[FAILED]:6.1%} {r[ERROR]:6.1%}  "
                     f"{benign:>7}  {clock:<6} {bar}")
    if NATIVE in summary:
        lines.append(f"({summary[NATIVE]['attacks']} attacks, "
                     f"{summary[NATIVE]['benign']} benign programs)")
    return "\n".join(lines)
