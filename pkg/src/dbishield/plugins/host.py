"""Plugin host: dependency-ordered initialization and the export registry."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Any, Callable, Iterable


class PluginError(Exception):
    pass


class MissingDependency(PluginError):
    def __init__(self, missing: str, required_by: str):
        super().__init__(f"{required_by} requires {missing}")
        self.missing = missing
        self.required_by = required_by


class DuplicateName(PluginError):
    pass


class Cycle(PluginError):
    pass


class UnknownExport(PluginError, KeyError):
    pass


@dataclass(frozen=True)
class PluginDescriptor:
    name: str
    version: str = "1.0"
    exports: tuple[str, ...] = ()
    depends: tuple[str, ...] = ()
    priority: int = 100


class Plugin:
    """Base class. Subclasses set the class attributes and override ``init``."""
    name = "plugin"
    version = "1.0"
    depends: tuple[str, ...] = ()
    priority = 100

    def exports(self) -> dict[str, Callable[..., Any]]:
        return {}

    @property
    def descriptor(self) -> PluginDescriptor:
        return PluginDescriptor(self.name, self.version, tuple(sorted(self.exports())),
                                tuple(self.depends), self.priority)

    def init(self, host: "PluginHost") -> None:
        pass

    def loaded(self, host: "PluginHost") -> None:
        """Called once the guest image is loaded into the engine."""

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"


def resolve_order(descriptors: Iterable[PluginDescriptor]) -> list[str]:
    """Topological order over ``depends``; ties broken by priority, then name."""
    by_name: dict[str, PluginDescriptor] = {}
    for d in descriptors:
        if d.name in by_name:
            raise DuplicateName(d.name)
        by_name[d.name] = d
    for d in by_name.values():
        for dep in d.depends:
            if dep not in by_name:
                raise MissingDependency(dep, d.name)
    waiting = {name: len(set(d.depends)) for name, d in by_name.items()}
    users: dict[str, list[str]] = {name: [] for name in by_name}
    for d in by_name.values():
        for dep in set(d.depends):
            users[dep].append(d.name)
    ready = [(d.priority, d.name) for d in by_name.values() if not waiting[d.name]]
    heapq.heapify(ready)
    order = []
    while ready:
        _, name = heapq.heappop(ready)
        order.append(name)
        for u in users[name]:
            waiting[u] -= 1
            if not waiting[u]:
                heapq.heappush(ready, (by_name[u].priority, u))
    if len(order) != len(by_name):
        stuck = sorted(n for n in by_name if n not in order)
        raise Cycle(f"dependency cycle among {', '.join(stuck)}")
    return order


class PluginHost:
    def __init__(self, plugins: Iterable[Plugin]):
        plugins = list(plugins)
        names = resolve_order(p.descriptor for p in plugins)
        self.plugins = {p.name: p for p in plugins}
        self.order = [self.plugins[n] for n in names]
        self.registry: dict[str, Callable[..., Any]] = {}
        self.engine = None

    def attach(self, engine) -> None:
        self.engine = engine
        engine.host = self
        self.registry.update({
            "engine.reverse_lookup": engine.reverse_lookup,
            "engine.virtual_clock": lambda: engine.virtual,
            "engine.flush": engine.request_flush,
        })
        for p in self.order:
            p.init(self)
            for export, fn in p.exports().items():
                self.registry[f"{p.name}.{export}"] = fn

    def loaded(self, engine) -> None:
        for p in self.order:
            p.loaded(self)

    def get(self, name: str) -> Plugin | None:
        return self.plugins.get(name)

    def call(self, export: str, *args, **kwargs):
        fn = self.registry.get(export)
        if fn is None:
            raise UnknownExport(export)
        return fn(*args, **kwargs)

    def rank(self, owner) -> tuple[int, str]:
        """Firing-order key for callbacks registered by ``owner``."""
        name = owner if isinstance(owner, str) else owner.name
        p = self.plugins.get(name)
        return (p.priority if p is not None else 100, name)


def register_stack(plugins: Iterable[Plugin]) -> PluginHost:
    return PluginHost(plugins)
