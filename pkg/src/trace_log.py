"""Run traces, one record per line:

    <t> | <subject> | <kind> | <json payload>

``t`` is global virtual time with six decimals, ``subject`` is ``run``,
``agent:<id>`` or ``pair:<i>-<j>``, and the payload is JSON with sorted keys.
Field meanings per kind are listed in data/schema.txt.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

logger = logging.getLogger(__name__)

KINDS = (
    "meta",
    "start",
    "commit",
    "session",
    "renewal",
    "violation",
    "arrive",
    "end",
)


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line


def agent_subject(agent_id: int) -> str:
    return f"agent:{agent_id}"


def pair_subject(i: int, j: int) -> str:
    lo, hi = sorted((i, j))
    return f"pair:{lo}-{hi}"


def parse_subject(subject: str) -> Tuple[str, Tuple[int, ...]]:
    if subject == "run":
        return "run", ()
    head, _, tail = subject.partition(":")
    try:
        if head == "agent":
            return head, (int(tail),)
        if head == "pair":
            lo, hi = tail.split("-")
            return head, (int(lo), int(hi))
    except ValueError:
        pass
    raise TraceFormatError(f"bad subject {subject!r}")


def _plain(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into JSON-native values."""
    if hasattr(value, "tolist"):
        return _plain(value.tolist())
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


@dataclass(frozen=True)
class TraceRecord:
    t: float
    subject: str
    kind: str
    payload: Dict[str, Any] = field(default_factory=dict)

    @property
    def agent(self) -> Optional[int]:
        head, ids = parse_subject(self.subject)
        return ids[0] if head == "agent" else None

    @property
    def pair(self) -> Optional[Tuple[int, int]]:
        head, ids = parse_subject(self.subject)
        return (ids[0], ids[1]) if head == "pair" else None

    def to_line(self) -> str:
        body = json.dumps(_plain(self.payload), sort_keys=True, separators=(",", ":"))
        return f"{self.t:.6f} | {self.subject} | {self.kind} | {body}"

    @classmethod
    def from_line(cls, line: str, number: Optional[int] = None) -> "TraceRecord":
        parts = line.rstrip("\n").split(" | ", 3)
        if len(parts) != 4:
            raise TraceFormatError("expected 't | subject | kind | payload'", number)
        raw_t, subject, kind, body = parts
        try:
            t = float(raw_t)
        except ValueError:
            raise TraceFormatError(f"bad time {raw_t!r}", number) from None
        if kind not in KINDS:
            raise TraceFormatError(f"unknown record kind {kind!r}", number)
        try:
            parse_subject(subject)
        except TraceFormatError as exc:
            raise TraceFormatError(str(exc), number) from None
        try:
            payload = json.loads(body)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"payload is not JSON ({exc.msg})", number) from None
        if not isinstance(payload, dict):
            raise TraceFormatError("payload must be a JSON object", number)
        return cls(t, subject, kind, payload)


@dataclass
class TraceLog:
    records: List[TraceRecord] = field(default_factory=list)

    def add(self, t: float, subject: str, kind: str, **payload: Any) -> TraceRecord:
        if kind not in KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        record = TraceRecord(t, subject, kind, _plain(payload))
        self.records.append(record)
        return record

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, kind: str) -> List[TraceRecord]:
        return [r for r in self.records if r.kind == kind]

    def for_agent(self, agent_id: int, kind: Optional[str] = None) -> List[TraceRecord]:
        subject = agent_subject(agent_id)
        return [r for r in self.records if r.subject == subject and (kind is None or r.kind == kind)]

    def for_pair(self, i: int, j: int, kind: Optional[str] = None) -> List[TraceRecord]:
        subject = pair_subject(i, j)
        return [r for r in self.records if r.subject == subject and (kind is None or r.kind == kind)]

    @property
    def meta(self) -> Dict[str, Any]:
        found = self.of_kind("meta")
        return found[0].payload if found else {}

    @property
    def summary(self) -> Dict[str, Any]:
        found = self.of_kind("end")
        return found[-1].payload if found else {}

    @property
    def agent_ids(self) -> List[int]:
        ids = {r.agent for r in self.records if r.agent is not None}
        return sorted(ids)

    @property
    def end_time(self) -> float:
        return max((r.t for r in self.records), default=0.0)

    def lines(self) -> List[str]:
        return [r.to_line() for r in self.records]

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        logger.info("Wrote %d trace records to %s", len(self.records), path)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "TraceLog":
        records = []
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            records.append(TraceRecord.from_line(line, number))
        return cls(records)

    @classmethod
    def read(cls, path: Path) -> "TraceLog":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Trace not found at {path}")
        with path.open(encoding="utf-8") as f:
            return cls.from_lines(f)
