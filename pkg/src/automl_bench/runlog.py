"""Line-delimited run log: one JSON object per line.

The first line is a header carrying the resolved configuration; every other
line is an event with at least the fields in :data:`EVENT_FIELDS`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import MalformedLog

EVENT_FIELDS = ("ts_seconds", "replica_id", "trial_digest", "event", "epoch_index", "error", "epoch_ops", "wall_seconds")
EVENT_KINDS = ("proposed", "epoch", "stopped", "recorded")


@dataclass
class LogEvent:
    ts_seconds: float
    replica_id: int
    trial_digest: str
    event: str
    epoch_index: int = 0
    error: float | None = None
    epoch_ops: int = 0
    wall_seconds: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in EVENT_FIELDS}
        d.update(self.extra)
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict, lineno: int = 0) -> "LogEvent":
        missing = [k for k in EVENT_FIELDS if k not in d]
        if missing:
            raise MalformedLog(f"line {lineno}: missing fields {missing}")
        if d["event"] not in EVENT_KINDS:
            raise MalformedLog(f"line {lineno}: unknown event {d['event']!r}")
        try:
            ev = cls(
                ts_seconds=float(d["ts_seconds"]),
                replica_id=int(d["replica_id"]),
                trial_digest=str(d["trial_digest"]),
                event=d["event"],
                epoch_index=int(d["epoch_index"]),
                error=None if d["error"] is None else float(d["error"]),
                epoch_ops=int(d["epoch_ops"]),
                wall_seconds=float(d["wall_seconds"]),
                extra={k: v for k, v in d.items() if k not in EVENT_FIELDS},
            )
        except (TypeError, ValueError) as exc:
            raise MalformedLog(f"line {lineno}: {exc}") from None
        if ev.ts_seconds < 0 or ev.epoch_ops < 0 or ev.wall_seconds < 0:
            raise MalformedLog(f"line {lineno}: negative time or ops")
        return ev


@dataclass
class RunLog:
    header: dict[str, Any] = field(default_factory=dict)
    events: list[LogEvent] = field(default_factory=list)

    def epochs(self) -> list[LogEvent]:
        return [e for e in self.events if e.event == "epoch"]

    def recorded(self) -> list[LogEvent]:
        return [e for e in self.events if e.event == "recorded"]

    def dumps(self) -> str:
        lines = [json.dumps({"record": "header", **self.header}, separators=(",", ":"), sort_keys=True)]
        lines.extend(e.to_json() for e in self.events)
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "RunLog":
        log = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLog(f"line {lineno}: {exc}") from None
            if not isinstance(d, dict):
                raise MalformedLog(f"line {lineno}: expected a JSON object")
            if d.get("record") == "header":
                if log.events or log.header:
                    raise MalformedLog(f"line {lineno}: header must be the first record")
                d.pop("record")
                log.header = d
                continue
            log.events.append(LogEvent.from_dict(d, lineno))
        return log

    @classmethod
    def read(cls, path) -> "RunLog":
        return cls.loads(Path(path).read_text(encoding="utf-8"))
