"""The host as a whole: firmware/bootloader, kernel boot, init, shutdown.

Boot runs in two phases, each with its own driver instance, as a real
machine does.  The bootloader brings the controller up, reads the GRUB
config from the first partition and takes the kernel command line from its
first ``linux`` entry.  The kernel then maps its image into RAM, programs
the IOMMU unless the command line switches it off, resets and re-initialises
the controller, mounts the filesystem and runs init.
"""

from __future__ import annotations

import hashlib

from ..diskfs import Ext2, parse_partitions
from ..diskfs.errors import DiskfsError
from .bootcfg import GRUB_CFG_PATHS, find_cfg, kernel_cmdline
from .driver import DriverError, NvmeDriver
from .iommu import IommuConfig
from .memory import MODULE_MAGIC

# Marker the simulated init payload carries; running it is logged, not emulated.
PAYLOAD_MARKER = b"ENVME-PAYLOAD"


class CachedBlockView:
    """Block view over the NVMe driver with a per-LBA page cache."""

    def __init__(self, driver: NvmeDriver):
        self.driver = driver
        self.block_size = driver.block_size
        self.block_count = driver.namespace_blocks
        self.cache: dict[int, bytes] = {}
        self.reads: list[tuple[int, int]] = []

    def read(self, lba: int, count: int) -> bytes:
        if lba < 0 or count < 0 or lba + count > self.block_count:
            raise DiskfsError(f"read [{lba}, {lba + count}) beyond device end {self.block_count}")
        bs = self.block_size
        i = lba
        end = lba + count
        while i < end:
            if i in self.cache:
                i += 1
                continue
            j = i
            while j < end and j not in self.cache:
                j += 1
            data = self.driver.read(i, j - i)
            self.reads.append((i, j - i))
            for k in range(j - i):
                self.cache[i + k] = data[k * bs:(k + 1) * bs]
            i = j
        return b"".join(self.cache[k] for k in range(lba, end))

    def drop_caches(self) -> None:
        self.cache.clear()


class HostMachine:
    def __init__(self, memory, bus, ctrl, log, clock, *, device_id: str = "nvme0", iommu: bool = False,
                 cpu_vendor: str = "amd", groups=None, grub_paths=GRUB_CFG_PATHS, init_path: str = "/sbin/init",
                 ready_timeout_ms: int = 500, partition: int = 0):
        if cpu_vendor not in ("amd", "intel"):
            raise ValueError("cpu_vendor must be amd or intel")
        self.memory = memory
        self.bus = bus
        self.ctrl = ctrl
        self.log = log
        self.clock = clock
        self.device_id = device_id
        self.iommu_requested = iommu
        self.cpu_vendor = cpu_vendor
        self.groups = [list(g) for g in (groups or [])]
        self.grub_paths = tuple(grub_paths)
        self.init_path = init_path
        self.ready_timeout_ms = ready_timeout_ms
        self.partition_index = partition
        self.state = "off"
        self.boots = 0
        self.driver: NvmeDriver | None = None
        self.view: CachedBlockView | None = None
        self.cmdline: str | None = None
        self.pending_modules: list[int] = []
        self.mutations: list[tuple[int, bytes]] = []
        bus.write_listeners.append(self._on_dma_write)

    def _emit(self, kind, **detail):
        return self.log.emit("host", kind, **detail)

    def new_driver(self) -> NvmeDriver:
        return NvmeDriver(self.ctrl, self.memory, self.bus, self.log, self.clock, device_id=self.device_id,
                          ready_timeout_ms=self.ready_timeout_ms)

    def iommu_config(self, enabled: bool) -> IommuConfig:
        allow = {}
        if enabled:
            q = self.memory.region("queue-area")
            b = self.memory.region("data-buffers")
            allow[self.device_id] = [(q.start, q.size), (b.start, b.size)]
        return IommuConfig(enabled=enabled, allow=allow, groups=self.groups)

    # filesystem access through the driver
    def _mount(self, view: CachedBlockView) -> Ext2:
        parts = parse_partitions(view)
        if self.partition_index >= len(parts):
            raise DiskfsError(f"no partition {self.partition_index}")
        part = parts[self.partition_index]
        view.read(part.start_lba, 1)  # filesystem probe of the partition start
        return Ext2(view, part)

    def _fail(self, stage: str, reason: str) -> str:
        self.state = "failed"
        self._emit("boot-failed", stage=stage, reason=reason)
        return "failed"

    def boot(self) -> str:
        if self.state not in ("off", "failed"):
            raise RuntimeError(f"cannot boot a host that is {self.state}")
        self.boots += 1
        self._emit("power-on", boot=self.boots)
        self.memory.clear_kernel()
        self.bus.iommu_configure(self.iommu_config(False))
        # firmware and bootloader
        drv = self.driver = self.new_driver()
        status = drv.driver_init()
        if status != "ready":
            return self._fail("bootloader", f"driver {status}")
        try:
            fs = self._mount(CachedBlockView(drv))
            cfg = fs.read_file(find_cfg(fs, self.grub_paths))
        except (DiskfsError, DriverError) as exc:
            return self._fail("bootloader", str(exc))
        self.cmdline = kernel_cmdline(cfg) or ""
        self._emit("bootloader", cmdline=self.cmdline, grub_sha256=hashlib.sha256(cfg).hexdigest())
        # kernel
        self.memory.load_kernel()
        tokens = self.cmdline.split()
        off = f"{self.cpu_vendor}_iommu=off" in tokens
        enabled = self.iommu_requested and not off
        self.bus.iommu_configure(self.iommu_config(enabled))
        self.state = "kernel"
        self._emit("kernel-start", cmdline=self.cmdline, iommu=enabled, iommu_requested=self.iommu_requested,
                   iommu_off_flag=off)
        drv = self.driver = self.new_driver()
        status = drv.driver_init()
        if status != "ready":
            return self._fail("kernel", f"driver {status}")
        try:
            self.view = CachedBlockView(drv)
            fs = self._mount(self.view)
            self._run_init(fs)
        except (DiskfsError, DriverError) as exc:
            return self._fail("kernel", str(exc))
        self.state = "running"
        self._emit("boot-complete", boot=self.boots)
        return "running"

    def _run_init(self, fs: Ext2) -> None:
        content = fs.read_file(self.init_path)
        self._emit("init-loaded", path=self.init_path, size=len(content),
                   sha256=hashlib.sha256(content).hexdigest())
        if PAYLOAD_MARKER in content:
            self._emit("payload-executed", path=self.init_path, sha256=hashlib.sha256(content).hexdigest())
            # the payload hands over to the real init: drop caches, reread
            self.view.drop_caches()
            self._emit("drop-caches")
            fs = Ext2(self.view, fs.partition)
            content = fs.read_file(self.init_path)
            self._emit("init-reread", path=self.init_path, sha256=hashlib.sha256(content).hexdigest())
        self._emit("init-executed", path=self.init_path, sha256=hashlib.sha256(content).hexdigest())

    def shutdown(self) -> None:
        if self.state == "off":
            return
        if self.driver is not None and self.driver.state != "unbound":
            self.driver.shutdown()
        self.bus.set_bus_master(self.device_id, False)
        self.memory.clear_kernel()
        self.bus.iommu_configure(self.iommu_config(False))
        self.pending_modules.clear()
        self.state = "off"
        self.view = None
        self._emit("host-shutdown", boot=self.boots)

    def reboot(self) -> str:
        self._emit("reboot")
        self.shutdown()
        return self.boot()

    # host actor
    def _on_dma_write(self, device: str, addr: int, data: bytes) -> None:
        r = self.memory.region_of(addr)
        if r is not None and r.kind == "kernel" and data.startswith(MODULE_MAGIC):
            self.pending_modules.append(addr)

    def script_mutation(self, addr: int, data: bytes) -> None:
        """Queue a host-side memory write for the next time the host runs."""
        self.mutations.append((addr, bytes(data)))

    def step(self) -> None:
        """One scheduling slot for the host actor."""
        if self.state in ("kernel", "running"):
            for addr in self.pending_modules:
                self.memory.write(self.memory.module_flag_addr, b"\x01")
                self._emit("module-executed", address=addr)
        self.pending_modules.clear()
        for addr, data in self.mutations:
            self.memory.write(addr, data)
            self._emit("host-mutation", address=addr, size=len(data))
        self.mutations.clear()

    # workload helpers
    def write(self, lba: int, data: bytes) -> None:
        self.driver.write(lba, data)
        if self.view is not None:
            for k in range(-(-len(data) // self.driver.block_size)):
                self.view.cache.pop(lba + k, None)

    def read(self, lba: int, count: int) -> bytes:
        return self.driver.read(lba, count)
