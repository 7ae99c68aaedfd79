"""Dynamic binary translation engine."""

from .cache import CACHE_BASE, Callout, CodeCache, TranslatedBlock
from .engine import (ARENA_HI, ARENA_LO, Engine, EngineAbort, EngineConfig,
                     EngineMetrics, InstrumentedResult, run_instrumented)
from .events import SKIP, ApiEvent, InstrEvent, Simulate

__all__ = [
    "ARENA_HI", "ARENA_LO", "CACHE_BASE", "Callout", "CodeCache", "TranslatedBlock",
    "Engine", "EngineAbort", "EngineConfig", "EngineMetrics", "InstrumentedResult",
    "run_instrumented", "SKIP", "ApiEvent", "InstrEvent", "Simulate",
]
