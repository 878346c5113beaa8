"""Block IO traces: ``R|W <lba> <count> [payload-file]`` per line, ``#`` comments."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from .driver import DriverError, IoTimeout


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceOp:
    direction: str
    lba: int
    count: int
    payload: str | None = None

    def line(self) -> str:
        s = f"{'R' if self.direction == 'read' else 'W'} {self.lba} {self.count}"
        return s + (f" {self.payload}" if self.payload else "")


def parse_trace(text: str) -> list[TraceOp]:
    ops = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] not in ("R", "W") or len(parts) not in (3, 4):
            raise TraceError(f"line {n}: expected 'R|W <lba> <count> [payload-file]', got {raw!r}")
        try:
            lba, count = int(parts[1], 0), int(parts[2], 0)
        except ValueError:
            raise TraceError(f"line {n}: lba and count must be integers") from None
        if lba < 0 or count <= 0:
            raise TraceError(f"line {n}: lba must be >= 0 and count > 0")
        ops.append(TraceOp("read" if parts[0] == "R" else "write", lba, count, parts[3] if len(parts) == 4 else None))
    return ops


def load_trace(path) -> list[TraceOp]:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh.read())


def format_trace(ops) -> str:
    return "".join(op.line() + "\n" for op in ops)


def replay_trace(driver, ops, log, base_dir=None) -> list:
    """Issue every operation in order and return the events logged meanwhile."""
    start = len(log)
    log.emit("host", "trace-start", ops=len(ops))
    for i, op in enumerate(ops):
        try:
            if op.direction == "read":
                data = driver.read(op.lba, op.count)
                log.emit("host", "trace-read", index=i, lba=op.lba, count=op.count,
                         sha256=hashlib.sha256(data).hexdigest())
            else:
                size = op.count * driver.block_size
                if op.payload:
                    path = os.path.join(base_dir or ".", op.payload)
                    with open(path, "rb") as fh:
                        data = fh.read(size)
                    data = data.ljust(size, b"\0")
                else:
                    data = bytes(size)
                driver.write(op.lba, data)
                log.emit("host", "trace-write", index=i, lba=op.lba, count=op.count)
        except IoTimeout:
            log.emit("host", "trace-aborted", index=i, reason="device dead")
            break
        except DriverError as exc:
            log.emit("host", "trace-error", index=i, error=str(exc))
    log.emit("host", "trace-end")
    return log.events[start:]
