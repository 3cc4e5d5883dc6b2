"""Trace events, violations, and newline-delimited JSON trace files."""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple

READ = "read"
WRITE = "write"
CAS = "cas"
CRASH = "crash"
RECOVER = "recover"
SEG_ENTER = "segment-enter"
SEG_EXIT = "segment-exit"
LIFECYCLE = "lifecycle"
ANNOTATION = "annotation"

MEMORY_KINDS = frozenset((READ, WRITE, CAS))

SPIN = "spin"  # note tag on repeat reads of a busy-wait loop


class Event(NamedTuple):
    """One totally ordered simulator event.

    seq is strictly increasing and gapless within a trace. cell/home/old/new
    are None for non-memory kinds. note is None, a short string tag, or a
    small JSON-safe dict (segment names, lifecycle transitions, op windows).
    """

    seq: int
    pid: int
    kind: str
    cell: int | None
    home: int | None
    old: int | None
    new: int | None
    note: Any


@dataclass
class Violation:
    """One auditor finding, anchored to the trace position that exposed it."""

    kind: str
    pid: int
    seq: int
    detail: str = ""

    def __str__(self) -> str:
        return f"[{self.kind}] pid={self.pid} seq={self.seq}: {self.detail}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pid": self.pid, "seq": self.seq, "detail": self.detail}


@dataclass
class TraceBundle:
    """A complete trace plus the static metadata needed to audit it.

    meta carries the cell table (id, home, name, role, init), the node
    registry, per-process program entry points, the schedule/workload
    configuration, and the live RMR account totals.
    """

    meta: dict
    events: list[Event] = field(default_factory=list)

    def to_lines(self) -> Iterable[str]:
        header = Event(0, 0, ANNOTATION, None, None, None, None, {"meta": self.meta})
        for ev in (header, *self.events):
            yield json.dumps(ev._asdict(), sort_keys=True, separators=(",", ":"))

    def write_ndjson(self, path: str, compress: bool = False) -> None:
        data = "\n".join(self.to_lines()) + "\n"
        if compress:
            # mtime pinned so identical bundles produce identical bytes
            with gzip.GzipFile(path, "wb", mtime=0) as fh:
                fh.write(data.encode())
        else:
            with open(path, "w") as fh:
                fh.write(data)

    @staticmethod
    def from_lines(lines: Iterable[str]) -> "TraceBundle":
        meta: dict | None = None
        events: list[Event] = []
        for line in lines:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            ev = Event(d["seq"], d["pid"], d["kind"], d["cell"], d["home"],
                       d["old"], d["new"], d["note"])
            if ev.seq == 0:
                if not isinstance(ev.note, dict) or "meta" not in ev.note:
                    raise ValueError("trace header missing meta")
                meta = ev.note["meta"]
            else:
                events.append(ev)
        if meta is None:
            raise ValueError("trace file has no header event")
        return TraceBundle(meta=meta, events=events)

    @staticmethod
    def read_ndjson(path: str) -> "TraceBundle":
        if path.endswith(".gz"):
            with gzip.open(path, "rt") as fh:
                return TraceBundle.from_lines(fh)
        with open(path) as fh:
            return TraceBundle.from_lines(fh)
