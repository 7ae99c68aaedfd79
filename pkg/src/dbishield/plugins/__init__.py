"""Plugin host and the stock plugins."""

from .apictl import APIControl
from .exchandler import ExceptionHandler
from .host import (Cycle, DuplicateName, MissingDependency, Plugin, PluginDescriptor,
                   PluginError, PluginHost, UnknownExport, register_stack,
                   resolve_order)
from .instrctl import InstrControl, InstrSelector, InvalidSelector, select
from .logger import Logger, SinkUnavailable
from .shield import GROUPS, Shield
from .tracer import NoopTracer, Tracer

__all__ = [
    "APIControl", "ExceptionHandler", "InstrControl", "InstrSelector", "InvalidSelector",
    "Logger", "SinkUnavailable", "NoopTracer", "Tracer", "Shield", "GROUPS", "select",
    "Cycle", "DuplicateName", "MissingDependency", "Plugin", "PluginDescriptor",
    "PluginError", "PluginHost", "UnknownExport", "register_stack", "resolve_order",
]
