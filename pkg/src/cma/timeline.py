"""Per-module activity records: the in-memory timeline and JSONL step logs."""

from __future__ import annotations

import json
import os
import threading
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

KINDS = ("step", "output", "fail", "restart", "activate", "deactivate")
LOG_EVENTS = ("step", "fail", "restart", "activate", "deactivate")


@dataclass(frozen=True)
class TimelineEvent:
    ts: int  # epoch ms
    module: str
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown timeline kind {self.kind!r}")


class Timeline:
    """Append-only event list; safe to share between tasks and threads."""

    def __init__(self, events: Iterable[TimelineEvent] = ()) -> None:
        self._events: list[TimelineEvent] = list(events)
        self._lock = threading.Lock()

    def append(self, ts: int, module: str, kind: str) -> TimelineEvent:
        ev = TimelineEvent(ts, module, kind)
        with self._lock:
            self._events.append(ev)
        return ev

    def events(self) -> list[TimelineEvent]:
        with self._lock:
            return list(self._events)

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def __iter__(self) -> Iterator[TimelineEvent]:
        return iter(self.events())

    def for_module(self, module: str, kind: str | None = None) -> list[TimelineEvent]:
        return [e for e in self.events() if e.module == module and (kind is None or e.kind == kind)]

    def modules(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.events():
            seen.setdefault(e.module, None)
        return list(seen)

    def kind_sequences(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for e in self.events():
            out.setdefault(e.module, []).append(e.kind)
        return out

    def multiset(self) -> Counter:
        return Counter((e.module, e.kind) for e in self.events())

    def to_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.events():
                fh.write(json.dumps(asdict(e), separators=(",", ":")) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike) -> "Timeline":
        events = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    events.append(TimelineEvent(int(obj["ts"]), obj["module"], obj["kind"]))
        return cls(events)


class ModuleLog:
    """One JSONL file per module under ``directory`` (``<module>.jsonl``)."""

    def __init__(self, directory: str | os.PathLike | None, *, fresh: bool = False) -> None:
        self.directory = Path(directory) if directory is not None else None
        self._mode = "w" if fresh else "a"
        self._files: dict[str, object] = {}
        self._lock = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def write(self, ts: int, module: str, state: str, event: str, output_summary: str | None = None, **extra) -> None:
        if self.directory is None:
            return
        if event not in LOG_EVENTS:
            raise ValueError(f"unknown log event {event!r}")
        line = {"ts": ts, "module": module, "state": state, "event": event, "output_summary": output_summary}
        line.update(extra)
        data = json.dumps(line, ensure_ascii=False, separators=(",", ":")) + "\n"
        with self._lock:
            fh = self._files.get(module)
            if fh is None:
                fh = open(self.directory / f"{module}.jsonl", self._mode, encoding="utf-8")
                self._files[module] = fh
            fh.write(data)
            fh.flush()

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()


def read_module_logs(directory: str | os.PathLike) -> list[dict]:
    lines = []
    for path in sorted(Path(directory).glob("*.jsonl")):
        if path.name == "timeline.jsonl":
            continue
        with open(path, encoding="utf-8") as fh:
            for raw in fh:
                if raw.strip():
                    lines.append(json.loads(raw))
    return lines


def log_event_multiset(directory: str | os.PathLike) -> Counter:
    """(module, kind) multiset implied by the per-module logs.

    A ``step`` line whose ``output_summary`` is non-null also stands for the
    timeline's ``output`` event of that step.
    """
    counts: Counter = Counter()
    for line in read_module_logs(directory):
        counts[(line["module"], line["event"])] += 1
        if line["event"] == "step" and line.get("output_summary") is not None:
            counts[(line["module"], "output")] += 1
    return counts


def timeline_from_logs(directory: str | os.PathLike) -> Timeline:
    events = []
    for line in read_module_logs(directory):
        events.append(TimelineEvent(int(line["ts"]), line["module"], line["event"]))
        if line["event"] == "step" and line.get("output_summary") is not None:
            events.append(TimelineEvent(int(line["ts"]), line["module"], "output"))
    events.sort(key=lambda e: e.ts)
    return Timeline(events)
