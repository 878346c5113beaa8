"""Logical clock and the JSON-lines event log shared by every actor."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable


@dataclass(frozen=True)
class Event:
    seq: int
    actor: str
    kind: str
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seq": self.seq, "actor": self.actor, "kind": self.kind, "detail": self.detail}

    def matches(self, kind: str | None = None, actor: str | None = None, **where: Any) -> bool:
        if kind is not None and self.kind != kind:
            return False
        if actor is not None and self.actor != actor:
            return False
        return all(self.detail.get(k) == v for k, v in where.items())


class EventLog:
    """Append-only, totally ordered record of everything that happened.

    Sequence numbers are the only timestamps, so two runs of the same
    scenario produce byte-identical logs.
    """

    def __init__(self) -> None:
        self.events: list[Event] = []
        self._listeners: list[Callable[[Event], None]] = []

    def emit(self, actor: str, kind: str, **detail: Any) -> Event:
        ev = Event(len(self.events), actor, kind, detail)
        self.events.append(ev)
        for fn in self._listeners:
            fn(ev)
        return ev

    def subscribe(self, fn: Callable[[Event], None]) -> None:
        self._listeners.append(fn)

    def find(self, kind: str | None = None, actor: str | None = None, **where: Any) -> list[Event]:
        return [e for e in self.events if e.matches(kind, actor, **where)]

    def first(self, kind: str | None = None, actor: str | None = None, **where: Any) -> Event | None:
        for e in self.events:
            if e.matches(kind, actor, **where):
                return e
        return None

    def kinds(self) -> list[str]:
        return [e.kind for e in self.events]

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @staticmethod
    def read_jsonl(lines: Iterable[str]) -> list[Event]:
        out = []
        for line in lines:
            line = line.strip()
            if line:
                d = json.loads(line)
                out.append(Event(d["seq"], d["actor"], d["kind"], d["detail"]))
        return out


class Clock:
    """Simulated time in integer milliseconds with one-shot timers."""

    def __init__(self) -> None:
        self.now = 0
        self._timers: list[tuple[int, int, Callable[[], None]]] = []
        self._n = 0

    def call_at(self, when: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._timers, (when, self._n, fn))
        self._n += 1

    def call_later(self, delay: int, fn: Callable[[], None]) -> None:
        self.call_at(self.now + delay, fn)

    def advance(self, ms: int = 1) -> None:
        target = self.now + ms
        while self._timers and self._timers[0][0] <= target:
            when, _, fn = heapq.heappop(self._timers)
            self.now = max(self.now, when)
            fn()
        self.now = target

    def run_due(self) -> None:
        self.advance(0)
