"""Physical-page IOMMU model and the DMA path every device access goes through.

The IOMMU is a per-device allow-list of physical pages; no address
translation is modelled.  Devices in the same group are not isolated from
each other, which is modelled as unrestricted access to peer MMIO stubs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .memory import HostMemory

MMIO_BASE = 0xF000_0000
MMIO_STRIDE = 0x0010_0000


class ConfigError(ValueError):
    pass


class DmaFault(Exception):
    def __init__(self, device: str, address: int, length: int, direction: str, reason: str):
        super().__init__(f"{device}: {direction} of {length} bytes at {address:#x} faulted ({reason})")
        self.device = device
        self.address = address
        self.length = length
        self.direction = direction
        self.reason = reason

    def to_dict(self) -> dict:
        return {"device": self.device, "address": self.address, "length": self.length,
                "direction": self.direction, "reason": self.reason}


@dataclass
class IommuConfig:
    enabled: bool = False
    page_size: int = 4096
    allow: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    groups: list[list[str]] = field(default_factory=list)

    def validate(self, devices=()) -> "IommuConfig":
        ps = self.page_size
        if ps <= 0 or ps & (ps - 1):
            raise ConfigError("page size must be a power of two")
        for dev, ranges in self.allow.items():
            for start, length in ranges:
                if start % ps or length % ps or length <= 0:
                    raise ConfigError(f"{dev}: range {start:#x}+{length:#x} is not page aligned")
        seen: set[str] = set()
        for g in self.groups:
            for dev in g:
                if dev in seen:
                    raise ConfigError(f"device {dev} appears in more than one group")
                seen.add(dev)
        groups = [list(g) for g in self.groups]
        for dev in devices:
            if dev not in seen:
                groups.append([dev])
                seen.add(dev)
        return IommuConfig(self.enabled, ps, {k: list(v) for k, v in self.allow.items()}, groups)


@dataclass
class PciFunction:
    device_id: str
    class_code: int
    bus_master: bool = False
    mmio_base: int = 0
    mmio: bytearray | None = None


class Bus:
    """Routes DMA from devices to host RAM or peer MMIO, enforcing the IOMMU."""

    def __init__(self, memory: HostMemory, log=None):
        self.memory = memory
        self.log = log
        self.functions: dict[str, PciFunction] = {}
        self.iommu = IommuConfig()
        self._allowed: dict[str, frozenset[int]] = {}
        self._group_of: dict[str, int] = {}
        self.write_listeners: list[Callable[[str, int, bytes], None]] = []

    # topology
    def attach(self, device_id: str, class_code: int, mmio_size: int = 0) -> PciFunction:
        if device_id in self.functions:
            raise ValueError(f"device {device_id} already attached")
        fn = PciFunction(device_id, class_code)
        if mmio_size:
            fn.mmio_base = MMIO_BASE + MMIO_STRIDE * len(self.functions)
            fn.mmio = bytearray(mmio_size)
        self.functions[device_id] = fn
        self.iommu_configure(self.iommu)
        return fn

    def set_bus_master(self, device_id: str, enabled: bool) -> None:
        self.functions[device_id].bus_master = enabled

    def is_enabled(self, device_id: str) -> bool:
        fn = self.functions.get(device_id)
        return bool(fn and fn.bus_master)

    def iommu_configure(self, cfg: IommuConfig) -> IommuConfig:
        applied = cfg.validate(self.functions)
        ps = applied.page_size
        self._allowed = {
            dev: frozenset(p for start, length in ranges for p in range(start // ps, (start + length) // ps))
            for dev, ranges in applied.allow.items()
        }
        self._group_of = {dev: i for i, g in enumerate(applied.groups) for dev in g}
        changed = (applied.enabled, applied.allow) != (self.iommu.enabled, self.iommu.allow)
        self.iommu = applied
        if self.log is not None and changed:
            self.log.emit("iommu", "iommu-configured", enabled=applied.enabled,
                          allowed_pages={d: len(p) for d, p in sorted(self._allowed.items())})
        return applied

    def same_group(self, a: str, b: str) -> bool:
        ga, gb = self._group_of.get(a), self._group_of.get(b)
        return ga is not None and ga == gb

    # DMA
    def _fault(self, device, addr, length, direction, reason):
        fault = DmaFault(device, addr, length, direction, reason)
        if self.log is not None:
            self.log.emit("iommu", "dma-fault", **fault.to_dict())
        raise fault

    def _peer_at(self, addr: int, length: int) -> PciFunction | None:
        for fn in self.functions.values():
            if fn.mmio is not None and fn.mmio_base <= addr and addr + length <= fn.mmio_base + len(fn.mmio):
                return fn
        return None

    def check(self, device: str, addr: int, length: int) -> bool:
        """True when ``device`` may touch [addr, addr+length) under the current config."""
        if not self.iommu.enabled:
            return True
        ps = self.iommu.page_size
        allowed = self._allowed.get(device, frozenset())
        return all(p in allowed for p in range(addr // ps, (addr + length - 1) // ps + 1))

    def dma_access(self, device: str, addr: int, length: int, direction: str, data: bytes | None = None):
        if length <= 0:
            raise ValueError("DMA length must be positive")
        if direction not in ("read", "write"):
            raise ValueError(direction)
        if direction == "write" and (data is None or len(data) != length):
            raise ValueError("write data must match length")
        if not self.is_enabled(device):
            self._fault(device, addr, length, direction, "disabled-device")
        mem = self.memory
        if 0 <= addr and addr + length <= mem.size:
            if not self.check(device, addr, length):
                self._fault(device, addr, length, direction, "unmapped")
            if direction == "read":
                return bytes(mem.data[addr:addr + length])
            mem.data[addr:addr + length] = data
            for fn in self.write_listeners:
                fn(device, addr, data)
            return None
        peer = self._peer_at(addr, length)
        if peer is None or peer.device_id == device:
            self._fault(device, addr, length, direction, "unmapped")
        if self.iommu.enabled and not self.same_group(device, peer.device_id):
            self._fault(device, addr, length, direction, "unmapped")
        off = addr - peer.mmio_base
        if self.log is not None:
            self.log.emit("bus", "peer-access", device=device, peer=peer.device_id, offset=off,
                          length=length, direction=direction)
        if direction == "read":
            return bytes(peer.mmio[off:off + length])
        peer.mmio[off:off + length] = data
        return None

    def dma_read(self, device: str, addr: int, length: int) -> bytes:
        return self.dma_access(device, addr, length, "read")

    def dma_write(self, device: str, addr: int, data: bytes) -> None:
        self.dma_access(device, addr, len(data), "write", data)
