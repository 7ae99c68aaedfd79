"""Attack and benign guest programs, their manifest and calibration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from ..asm import Assembly, assemble_with_symbols
from ..image import Image, Segment
from ..vm.machine import Limits
from ..vm.reference import ReferenceRun

THRESHOLD_FACTOR = 1.5
RUNTIME = "runtime"


@dataclass(frozen=True)
class ProgramSpec:
    name: str
    kind: str                      # "attack" or "benign"
    group: str
    description: str
    detect_config: str | None = None
    bound: str | None = None       # "upper", "lower" or "equal"
    params: dict[str, int] = field(default_factory=dict)
    leaf: str | None = None        # taxonomy leaf slug
    problem: str | None = None     # problem class, e.g. "P1.c"
    expected_native: str | None = None
    expected_bare: str | None = None

    @property
    def is_attack(self) -> bool:
        return self.kind == "attack"


def _files():
    return resources.files(__package__)


@lru_cache(maxsize=None)
def manifest() -> dict[str, ProgramSpec]:
    doc = json.loads((_files() / "manifest.json").read_text(encoding="utf-8"))
    return {p["name"]: ProgramSpec(**p) for p in doc["programs"]}


def out_of_scope() -> list[str]:
    """Taxonomy leaves with no analog in the toy environment."""
    doc = json.loads((_files() / "manifest.json").read_text(encoding="utf-8"))
    return list(doc.get("out_of_scope", []))


def names(kind: str | None = None) -> list[str]:
    return [n for n, p in manifest().items() if kind is None or p.kind == kind]


def attacks() -> list[str]:
    return names("attack")


def benign() -> list[str]:
    return names("benign")


@lru_cache(maxsize=None)
def source(name: str) -> str:
    progs = _files() / "programs"
    return (progs / f"{name}.s").read_text(encoding="utf-8") + "\n" + (
        progs / f"{RUNTIME}.s").read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def _assembled(name: str) -> Assembly:
    return assemble_with_symbols(source(name), f"{name}.s")


def patch_words(asm: Assembly, values: dict[str, int]) -> Image:
    """Return a copy of the image with the data words at ``values`` labels set."""
    img = asm.image
    segs = []
    for seg in img.segments:
        data = bytearray(seg.data)
        for label, v in values.items():
            addr = asm.symbols[label]
            if seg.vaddr <= addr < seg.vaddr + len(data):
                off = addr - seg.vaddr
                data[off:off + 4] = (v & 0xFFFFFFFF).to_bytes(4, "little")
        segs.append(Segment(seg.vaddr, seg.perms, bytes(data), seg.memlen))
    return Image(img.entry, segs, img.args, list(img.env))


def load(name: str, **overrides: int) -> Image:
    """Assemble program ``name`` with its manifest parameters applied."""
    spec = manifest()[name]
    asm = _assembled(name)
    values = {**spec.params, **overrides}
    unknown = set(values) - set(asm.symbols)
    if unknown:
        raise KeyError(f"{name}: no data word for {sorted(unknown)}")
    return patch_words(asm, values)


def symbols(name: str) -> dict[str, int]:
    return dict(_assembled(name).symbols)


def measure(name: str, limits: Limits | None = None) -> int:
    """Run ``name`` natively and return the value it stored at ``metric``."""
    asm = _assembled(name)
    run = ReferenceRun(load(name), limits)
    run.run()
    return run.machine.mem.peek32(asm.symbols["metric"])


def threshold_for(bound: str, metric: int) -> int:
    if bound == "upper":
        return math.floor(metric * THRESHOLD_FACTOR)
    return metric


def calibrate(limits: Limits | None = None) -> dict[str, int]:
    """Thresholds for every bounded program, derived from native runs."""
    return {n: threshold_for(p.bound, measure(n, limits))
            for n, p in manifest().items() if p.bound}


__all__ = ["ProgramSpec", "manifest", "names", "attacks", "benign", "source", "load",
           "symbols", "out_of_scope", "measure", "calibrate", "threshold_for", "patch_words",
           "THRESHOLD_FACTOR"]
