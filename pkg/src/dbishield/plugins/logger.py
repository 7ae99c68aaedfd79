"""Logger: named trace channels backed by files or memory."""

from __future__ import annotations

import io
from pathlib import Path

from .host import Plugin, PluginHost


class SinkUnavailable(OSError):
    pass


class Channel:
    def __init__(self, name: str, sink: str | Path | None = None):
        self.name = name
        self.seq = 0
        self.path = Path(sink) if sink is not None else None
        try:
            self._fh = (open(self.path, "w", encoding="ascii") if self.path is not None
                        else io.StringIO())
        except OSError as exc:
            raise SinkUnavailable(f"cannot open {sink}: {exc}") from exc

    def write(self, record: str) -> int:
        seq = self.seq
        self._fh.write(f"{seq} {record}\n")
        self.seq += 1
        return seq

    def lines(self) -> list[str]:
        if self.path is not None:
            self._fh.flush()
            return self.path.read_text(encoding="ascii").splitlines()
        return self._fh.getvalue().splitlines()

    def close(self) -> None:
        if not self._fh.closed and self.path is not None:
            self._fh.close()


class Logger(Plugin):
    name = "Logger"
    priority = 0

    def __init__(self, enabled: bool = True, directory: str | Path | None = None):
        self.enabled = enabled
        self.directory = Path(directory) if directory is not None else None
        self.channels: dict[str, Channel] = {}

    def exports(self):
        return {"log_event": self.log_event, "open_trace": self.open_trace,
                "lines": self.lines}

    def init(self, host: PluginHost) -> None:
        self.host = host

    def open_trace(self, channel: str, sink: str | Path | None = None) -> Channel:
        if channel in self.channels:
            return self.channels[channel]
        if sink is None and self.directory is not None:
            sink = self.directory / f"{channel}.log"
        ch = self.channels[channel] = Channel(channel, sink if self.enabled else None)
        return ch

    def log_event(self, channel: str, record: str) -> None:
        if not self.enabled:
            return
        ch = self.channels.get(channel) or self.open_trace(channel)
        ch.write(record)

    def lines(self, channel: str) -> list[str]:
        ch = self.channels.get(channel)
        return ch.lines() if ch is not None else []

    def close(self) -> None:
        for ch in self.channels.values():
            ch.close()
