"""Benchmark configuration: the mode matrix and its JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..engine import EngineConfig
from ..plugins import (GROUPS, APIControl, ExceptionHandler, InstrControl, Logger,
                       NoopTracer, Shield, Tracer)
from ..vm.machine import Limits

FIXED_TIMESTAMP = "1970-01-01T00:00:00Z"
NATIVE = "native"

PLUGIN_FACTORIES = {
    "instrctl": InstrControl,
    "apictl": APIControl,
    "exchandler": ExceptionHandler,
    "logger": Logger,
    "tracer": Tracer,
    "noop": NoopTracer,
    "shield": Shield,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Mode:
    name: str
    engine: bool = True
    plugins: tuple[str, ...] = ()
    groups: tuple[str, ...] = ()
    link_blocks: bool = False
    api_hook_mode: str = "dbi"
    smc_invalidate: bool = True
    disasm: str = "full"

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("mode without a name")
        unknown = [p for p in self.plugins if p not in PLUGIN_FACTORIES]
        if unknown:
            raise ConfigError(f"mode {self.name}: unknown plugins {unknown}")
        bad = [g for g in self.groups if g not in GROUPS]
        if bad:
            raise ConfigError(f"mode {self.name}: unknown shield groups {bad}")
        if self.groups and "shield" not in self.plugins:
            raise ConfigError(f"mode {self.name}: shield groups without the shield plugin")
        if self.api_hook_mode not in ("dbi", "detour"):
            raise ConfigError(f"mode {self.name}: api_hook_mode {self.api_hook_mode!r}")
        if self.disasm not in ("full", "legacy"):
            raise ConfigError(f"mode {self.name}: disasm {self.disasm!r}")
        if not self.engine and (self.plugins or self.link_blocks):
            raise ConfigError(f"mode {self.name}: plugins need the engine")

    def engine_config(self) -> EngineConfig:
        return EngineConfig(link_blocks=self.link_blocks, smc_invalidate=self.smc_invalidate,
                            disasm=self.disasm, api_hook_mode=self.api_hook_mode)

    def build_plugins(self) -> list:
        out = []
        for p in self.plugins:
            if p == "shield":
                out.append(Shield(groups=self.groups))
            elif p == "apictl":
                out.append(APIControl(mode=self.api_hook_mode))
            else:
                out.append(PLUGIN_FACTORIES[p]())
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plugins"] = list(self.plugins)
        d["groups"] = list(self.groups)
        return d


SHIELD_STACK = ("instrctl", "apictl", "shield")
FULL_STACK = ("instrctl", "apictl", "exchandler", "logger", "noop", "shield")


def _without(group: str) -> Mode:
    return Mode(f"full-no-{group}", plugins=FULL_STACK,
                groups=tuple(g for g in GROUPS if g != group))


# Standard matrix. smc_off and legacy are negative controls: each breaks one
# engine feature on purpose so the test aimed at that feature has something
# to detect. They are excluded from fidelity checks.
NEGATIVE_CONTROLS = ("smc_off", "legacy")

STANDARD_MODES: dict[str, Mode] = {m.name: m for m in [
    Mode("bare"),
    Mode("shield", plugins=SHIELD_STACK, groups=GROUPS),
    Mode("shield-traced", plugins=SHIELD_STACK + ("logger", "tracer"), groups=GROUPS),
    Mode("full", plugins=FULL_STACK, groups=GROUPS),
    *(_without(g) for g in GROUPS),
    Mode("full-linked", plugins=FULL_STACK, groups=GROUPS, link_blocks=True),
    Mode("detour", plugins=FULL_STACK, groups=GROUPS, api_hook_mode="detour"),
    Mode("smc_off", plugins=FULL_STACK, groups=GROUPS, smc_invalidate=False),
    Mode("legacy", plugins=FULL_STACK, groups=GROUPS, disasm="legacy"),
]}


@dataclass
class BenchConfig:
    modes: list[Mode] = field(default_factory=lambda: list(STANDARD_MODES.values()))
    tests: list[str] | None = None
    limits: Limits = field(default_factory=Limits)
    report: str | None = None
    timestamp: str = FIXED_TIMESTAMP
    jobs: int = 1
    min_pass_rate: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        seen = set()
        for m in self.modes:
            m.validate()
            if m.name in seen or m.name == NATIVE:
                raise ConfigError(f"duplicate mode name {m.name!r}")
            seen.add(m.name)
        for name in self.min_pass_rate:
            if name != NATIVE and name not in seen:
                raise ConfigError(f"threshold for unknown mode {name!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.tests is not None:
            from .. import corpus
            missing = sorted(set(self.tests) - set(corpus.names()))
            if missing:
                raise ConfigError(f"unknown tests {missing}")

    def to_dict(self) -> dict:
        return {
            "modes": [m.to_dict() for m in self.modes],
            "tests": self.tests,
            "limits": asdict(self.limits),
            "timestamp": self.timestamp,
            "min_pass_rate": dict(self.min_pass_rate),
        }


def mode_from_dict(d: dict) -> Mode:
    if isinstance(d, str):
        if d not in STANDARD_MODES:
            raise ConfigError(f"unknown standard mode {d!r}")
        return STANDARD_MODES[d]
    try:
        d = dict(d)
        d["plugins"] = tuple(d.get("plugins", ()))
        d["groups"] = tuple(d.get("groups", ()))
        return Mode(**d)
    except TypeError as e:
        raise ConfigError(f"bad mode entry: {e}") from None


def config_from_dict(doc: dict) -> BenchConfig:
    known = {"modes", "tests", "limits", "report", "timestamp", "jobs", "min_pass_rate"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    cfg = BenchConfig()
    if "modes" in doc:
        cfg.modes = [mode_from_dict(m) for m in doc["modes"]]
    cfg.tests = doc.get("tests")
    if "limits" in doc:
        try:
            cfg.limits = Limits(**doc["limits"])
        except TypeError as e:
            raise ConfigError(f"bad limits: {e}") from None
    cfg.report = doc.get("report")
    cfg.timestamp = doc.get("timestamp", FIXED_TIMESTAMP)
    cfg.jobs = int(doc.get("jobs", 1))
    cfg.min_pass_rate = {k: float(v) for k, v in doc.get("min_pass_rate", {}).items()}
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> BenchConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(doc)
