"""Flat physical memory with labelled regions and a planted kernel image."""

from __future__ import annotations

import random
from dataclasses import dataclass

MiB = 1 << 20
PAGE = 4096

# First bytes of the page the simulated kernel text starts at.
KERNEL_SIGNATURE = b"SIMKERNEL:linux-6.4.0:text-start"
# A payload written into kernel memory that starts with this is "run" as a module.
MODULE_MAGIC = b"\x7fKMOD"
# Byte within the signature page the kernel sets to 1 once a module has run.
MODULE_FLAG_OFFSET = 0xFF0

REGION_KINDS = ("kernel", "queue-area", "data-buffers", "other")


@dataclass(frozen=True)
class Region:
    name: str
    kind: str
    start: int
    end: int

    def __contains__(self, addr: int) -> bool:
        return self.start <= addr < self.end

    @property
    def size(self) -> int:
        return self.end - self.start


def default_layout(size: int) -> list[Region]:
    if size < 16 * MiB or size % PAGE:
        raise ValueError("host memory must be a page multiple of at least 16 MiB")
    k0 = size // 2
    k1 = k0 + size // 4
    return [
        Region("firmware", "other", 0, 1 * MiB),
        Region("queues", "queue-area", 1 * MiB, 2 * MiB),
        Region("buffers", "data-buffers", 2 * MiB, 6 * MiB),
        Region("free-low", "other", 6 * MiB, k0),
        Region("kernel", "kernel", k0, k1),
        Region("free-high", "other", k1, size),
    ]


class HostMemory:
    def __init__(self, size: int = 64 * MiB, seed: int = 0, regions: list[Region] | None = None):
        self.size = size
        self.seed = seed
        self.data = bytearray(size)
        self.regions = regions if regions is not None else default_layout(size)
        spans = sorted((r.start, r.end) for r in self.regions)
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if a1 > b0:
                raise ValueError("memory regions overlap")
        if spans and (spans[0][0] < 0 or spans[-1][1] > size):
            raise ValueError("memory region outside physical memory")
        kernel = self.region("kernel")
        rng = random.Random(seed)
        # never the last kernel page: injected modules land on the page above it
        self.signature_addr = kernel.start + rng.randrange(kernel.size // PAGE - 1) * PAGE
        self._filler = rng.randbytes(PAGE - len(KERNEL_SIGNATURE))

    def region(self, kind: str) -> Region:
        for r in self.regions:
            if r.kind == kind:
                return r
        raise KeyError(kind)

    def region_of(self, addr: int) -> Region | None:
        for r in self.regions:
            if addr in r:
                return r
        return None

    def read(self, addr: int, n: int) -> bytes:
        if addr < 0 or addr + n > self.size:
            raise IndexError("host memory access out of range")
        return bytes(self.data[addr:addr + n])

    def write(self, addr: int, data: bytes) -> None:
        if addr < 0 or addr + len(data) > self.size:
            raise IndexError("host memory access out of range")
        self.data[addr:addr + len(data)] = data

    # kernel image handling
    @property
    def module_flag_addr(self) -> int:
        return self.signature_addr + MODULE_FLAG_OFFSET

    def load_kernel(self) -> None:
        page = bytearray(KERNEL_SIGNATURE + self._filler)
        page[MODULE_FLAG_OFFSET] = 0
        self.write(self.signature_addr, bytes(page))

    def clear_kernel(self) -> None:
        k = self.region("kernel")
        self.data[k.start:k.end] = bytes(k.size)

    @property
    def module_executed(self) -> bool:
        return self.data[self.module_flag_addr] == 1
