"""Benchmark matrix: modes, runner, report."""

from .config import (FIXED_TIMESTAMP, NATIVE, NEGATIVE_CONTROLS, STANDARD_MODES,
                     BenchConfig, ConfigError, Mode, config_from_dict, load_config)
from .report import (build_report, dumps, format_summary, read_report, run_matrix,
                     summarize, unmet_thresholds, verdict_vector, write_report)
from .runner import (ERROR, FAILED, PASSED, RunResult, classify, classify_benign,
                     reference, run_one, run_results)

__all__ = [
    "FIXED_TIMESTAMP", "NATIVE", "NEGATIVE_CONTROLS", "STANDARD_MODES", "BenchConfig",
    "ConfigError", "Mode", "config_from_dict", "load_config", "build_report", "dumps",
    "format_summary", "read_report", "run_matrix", "summarize", "unmet_thresholds",
    "verdict_vector", "write_report", "ERROR", "FAILED", "PASSED", "RunResult",
    "classify", "classify_benign", "reference", "run_one", "run_results",
]
