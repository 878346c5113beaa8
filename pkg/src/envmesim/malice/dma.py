"""Device-side view of host RAM: signature scanning and payload injection."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..host.iommu import DmaFault
from ..host.memory import PAGE

DEFAULT_STRIDE = 1 << 20


@dataclass
class ScanResult:
    hits: list[int]
    coverage: float  # fraction of [0, size) the device could read
    faults: int
    windows: int

    def to_dict(self) -> dict:
        return {"hits": self.hits, "coverage": round(self.coverage, 6), "faults": self.faults,
                "windows": self.windows}


@dataclass
class InjectResult:
    verified: bool
    reason: str = ""  # "", "fault", "mismatch"
    fault: dict | None = None
    executed: bool | None = None
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"verified": self.verified, "reason": self.reason, "fault": self.fault, "executed": self.executed}


def _find_all(buf: bytes, sig: bytes, base: int, limit: int, hits: set) -> None:
    i = buf.find(sig)
    while i >= 0:
        if base + i < limit:
            hits.add(base + i)
        i = buf.find(sig, i + 1)


def scan_host_memory(bus, device: str, mem_size: int, signature: bytes, stride: int = DEFAULT_STRIDE,
                     overlap: int | None = None) -> ScanResult:
    """Read [0, mem_size) window by window and return every signature address.

    Windows are ``stride`` bytes and each read runs ``overlap`` bytes
    (default len(signature) - 1) into the next window, so a signature that
    straddles a window edge is still seen.  A window that faults is retried
    page by page; unreadable pages are skipped and counted against coverage.
    """
    if not signature:
        raise ValueError("empty signature")
    if stride <= 0:
        raise ValueError("stride must be positive")
    overlap = len(signature) - 1 if overlap is None else overlap
    hits: set[int] = set()
    readable = 0
    faults = 0
    windows = 0
    for start in range(0, mem_size, stride):
        windows += 1
        own_end = min(start + stride, mem_size)
        end = min(own_end + overlap, mem_size)
        try:
            buf = bus.dma_read(device, start, end - start)
            readable += own_end - start
            _find_all(buf, signature, start, own_end, hits)
            continue
        except DmaFault:
            faults += 1
        # page-granular fallback: search each contiguous readable run
        run_start = None
        parts: list[bytes] = []
        page = start - start % PAGE
        while page < end:
            a, b = max(page, start), min(page + PAGE, end)
            try:
                chunk = bus.dma_read(device, a, b - a)
            except DmaFault:
                faults += 1
                chunk = None
            if chunk is not None:
                if run_start is None:
                    run_start = a
                parts.append(chunk)
                readable += max(0, min(b, own_end) - a)
            elif run_start is not None:
                _find_all(b"".join(parts), signature, run_start, own_end, hits)
                run_start, parts = None, []
            page += PAGE
        if run_start is not None:
            _find_all(b"".join(parts), signature, run_start, own_end, hits)
    return ScanResult(sorted(hits), readable / mem_size if mem_size else 1.0, faults, windows)


def inject_payload(bus, device: str, addr: int, payload: bytes, run_host=None, flag_addr: int | None = None
                   ) -> InjectResult:
    """DMA-write ``payload``, let the host run, then read it back and compare."""
    try:
        bus.dma_write(device, addr, payload)
    except DmaFault as f:
        return InjectResult(False, "fault", f.to_dict())
    if run_host is not None:
        run_host()
    try:
        back = bus.dma_read(device, addr, len(payload))
        flag = bus.dma_read(device, flag_addr, 1) if flag_addr is not None else None
    except DmaFault as f:
        return InjectResult(False, "fault", f.to_dict())
    executed = None if flag is None else flag == b"\x01"
    if back != payload:
        return InjectResult(False, "mismatch", executed=executed)
    return InjectResult(True, executed=executed)
