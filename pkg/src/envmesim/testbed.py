"""One simulated machine: host RAM and bus, the NVMe device with its firmware tap, and the host."""

from __future__ import annotations

from .backend import BlockStore
from .device.controller import Controller
from .events import Clock, EventLog
from .host.iommu import Bus
from .host.machine import HostMachine
from .host.memory import HostMemory
from .malice.engine import Malice

MiB = 1 << 20


class Testbed:
    def __init__(self, *, image: bytes | None = None, block_size: int = 512, namespace_blocks: int = 2048,
                 memory_size: int = 64 * MiB, seed: int = 0, device: dict | None = None, host: dict | None = None,
                 keys=(), playbooks=(), detectors: dict | None = None, malice: dict | None = None,
                 peers=(), base_dir: str | None = None, backing_path: str | None = None, corrupt_seed=None):
        self.log = EventLog()
        self.clock = Clock()
        self.memory = HostMemory(memory_size, seed)
        self.bus = Bus(self.memory, self.log)
        for p in peers:
            self.bus.attach(p["id"], int(p.get("class_code", 0x020000)), int(p.get("mmio_size", 4096)))
        store_seed = seed if corrupt_seed is None else corrupt_seed
        if image is not None:
            self.store = BlockStore.from_image(image, block_size, seed=store_seed, log=self.log, path=backing_path)
        else:
            self.store = BlockStore(block_size, namespace_blocks, seed=store_seed, log=self.log, path=backing_path)
        device = dict(device or {})
        device_id = device.pop("device_id", "nvme0")
        self.malice = Malice(log=self.log, clock=self.clock, store=self.store, bus=self.bus, device_id=device_id,
                             keys=keys, playbooks=playbooks, detectors=detectors, base_dir=base_dir,
                             run_host=self._run_host, **(malice or {}))
        self.ctrl = Controller(self.bus, self.store, self.log, self.clock, device_id=device_id, tap=self.malice,
                               **device)
        self.host = HostMachine(self.memory, self.bus, self.ctrl, self.log, self.clock, device_id=device_id,
                                **(host or {}))

    def _run_host(self) -> None:
        self.host.step()

    def close(self) -> None:
        self.store.close()
