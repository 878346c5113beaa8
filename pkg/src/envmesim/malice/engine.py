"""The adversarial firmware layer: a controller tap driving armed playbooks.

Keys found in the write stream (or timers, or ordered key sequences) arm a
playbook.  Armed playbooks run after the command that armed them has
completed, so the triggering write is already on the medium.  Steps that
need the host filesystem unmounted register hooks for the next shutdown
window instead of running immediately.
"""

from __future__ import annotations

import hashlib
import os
import struct
from collections import deque
from dataclasses import dataclass, field

from ..backend import BackendError
from ..device.controller import Tap
from ..diskfs import Ext2, NotFound, StoreView, parse_partitions, to_absolute_lbas
from ..diskfs.errors import DiskfsError
from ..host.iommu import DmaFault
from ..host.memory import KERNEL_SIGNATURE, MODULE_MAGIC, PAGE
from . import grub
from .activation import ActivationKey, ActivationScanner, SequenceTracker
from .bootpattern import BootPatternDetector, LbaWindow
from .dma import DEFAULT_STRIDE, inject_payload, scan_host_memory
from .mining import DEFAULT_QUOTA, MiningRule, QuarantineStore, mine_files
from .shadow import ShadowRule, ShadowTable, SizeOverflow

STEP_KINDS = ("install-shadow", "patch-grub", "dos", "mine", "scan-inject", "exfil-event", "replace-file")
DEFAULT_MODULE = MODULE_MAGIC + b"\0sim-module: spawn root shell\0"


class PlaybookError(ValueError):
    pass


@dataclass
class Step:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise PlaybookError(f"unknown step {self.kind!r}; expected one of {', '.join(STEP_KINDS)}")


@dataclass
class Playbook:
    pid: str
    trigger: dict
    steps: list[Step]
    state: str = "dormant"  # dormant | armed | done

    def __post_init__(self):
        kinds = [k for k in ("key", "time_ms", "sequence") if k in self.trigger]
        if len(kinds) != 1:
            raise PlaybookError(f"playbook {self.pid}: trigger needs exactly one of key, time_ms, sequence")

    @classmethod
    def parse(cls, d: dict) -> "Playbook":
        try:
            steps = [Step(s["step"], {k: v for k, v in s.items() if k != "step"}) for s in d.get("steps", [])]
            return cls(d["id"], dict(d["trigger"]), steps)
        except KeyError as exc:
            raise PlaybookError(f"playbook missing field {exc}") from None


def payload_bytes(params: dict, base_dir: str | None = None, default: bytes | None = None) -> bytes:
    if "text" in params:
        return params["text"].encode()
    if "hex" in params:
        return bytes.fromhex("".join(params["hex"].split()))
    if "file" in params:
        path = params["file"] if base_dir is None else os.path.join(base_dir, params["file"])
        with open(path, "rb") as fh:
            return fh.read()
    if default is not None:
        return default
    raise PlaybookError("step needs a payload: text, hex or file")


class Malice(Tap):
    def __init__(self, *, log, clock, store, bus, device_id: str = "nvme0", keys=(), playbooks=(),
                 detectors: dict | None = None, quarantine_quota: int = DEFAULT_QUOTA, run_host=None,
                 memory_size: int | None = None, base_dir: str | None = None, exfil_channel: str = "abstract"):
        self.log = log
        self.clock = clock
        self.store = store
        self.bus = bus
        self.device_id = device_id
        self.run_host = run_host
        self.memory_size = memory_size if memory_size is not None else bus.memory.size
        self.base_dir = base_dir
        self.keys = {k.key_id: k for k in keys}
        self.scanner = ActivationScanner(keys) if keys else None
        self.shadow = ShadowTable(store.block_size, store.block_count, log)
        self.quarantine = QuarantineStore(quarantine_quota, log, exfil_channel)
        self.playbooks = {p.pid: p for p in playbooks}
        self.trackers = {p.pid: SequenceTracker(p.trigger["sequence"])
                         for p in self.playbooks.values() if "sequence" in p.trigger}
        self.pending: deque[str] = deque()
        self.hooks: list = []
        self.retries: list[tuple[str, int, Step]] = []
        self._current = ("", -1)
        self.ctrl = None
        self._running = False
        for name, windows in (detectors or {}).items():
            self.shadow.register_detector(name, BootPatternDetector(
                name, [LbaWindow(int(a), int(b), str(i)) for i, (a, b) in enumerate(windows)], log))
        for p in self.playbooks.values():
            unknown = [k for k in ([p.trigger.get("key")] if "key" in p.trigger else p.trigger.get("sequence", []))
                       if k not in self.keys]
            if unknown:
                raise PlaybookError(f"playbook {p.pid} refers to unknown keys {unknown}")
            if "time_ms" in p.trigger:
                clock.call_at(int(p.trigger["time_ms"]), lambda pid=p.pid: self.arm(pid, "time", run=True))

    def _emit(self, kind, **detail):
        return self.log.emit("malice", kind, **detail)

    # activation
    def on_activation(self, key_id: str) -> None:
        if key_id not in self.keys:
            return
        for p in self.playbooks.values():
            if p.trigger.get("key") == key_id:
                self.arm(p.pid, f"key:{key_id}")
        for pid, tracker in self.trackers.items():
            result = tracker.feed(key_id)
            if result == "ignored":
                continue
            self._emit("sequence-progress", playbook=pid, key=key_id, result=result, progress=tracker.progress)
            if result == "armed":
                self.arm(pid, "sequence")

    def arm(self, pid: str, cause: str, run: bool = False) -> bool:
        p = self.playbooks[pid]
        if p.state != "dormant":
            return False
        p.state = "armed"
        self._emit("activated", playbook=pid, cause=cause)
        self.pending.append(pid)
        if run:
            self.run_pending()
        return True

    def run_pending(self) -> None:
        if self._running:
            return
        self._running = True
        try:
            while self.pending:
                p = self.playbooks[self.pending.popleft()]
                for i, step in enumerate(p.steps):
                    self._run_step(p.pid, i, step)
                p.state = "done"
        finally:
            self._running = False

    def _run_step(self, pid: str, index: int, step: Step) -> str:
        handler = getattr(self, "_step_" + step.kind.replace("-", "_"))
        self._current = (pid, index)
        try:
            outcome, detail = handler(step.params)
        except (DiskfsError, SizeOverflow, BackendError, PlaybookError, ValueError, OSError) as exc:
            outcome, detail = ("skipped" if isinstance(exc, NotFound) else "failed"), {"error": str(exc)}
        self._emit("step", playbook=pid, index=index, step=step.kind, outcome=outcome, **detail)
        return outcome

    # filesystem helpers (firmware reads the medium directly)
    def _fs(self, params: dict) -> Ext2:
        view = StoreView(self.store)
        parts = parse_partitions(view)
        idx = int(params.get("partition", 0))
        if not 0 <= idx < len(parts):
            raise NotFound(f"no partition {idx}")
        return Ext2(view, parts[idx])

    def boot_detector(self, name: str = "boot", partition: int = 0) -> BootPatternDetector:
        det = self.shadow.detectors.get(name)
        if det is None:
            fs = self._fs({"partition": partition})
            det = BootPatternDetector.from_layout(name, fs.partition.start_lba, self.store.block_size,
                                                  fs.inode_table_window(0), self.log)
            self.shadow.register_detector(name, det)
            self._emit("detector-registered", detector=name,
                       windows=[[w.start, w.end, w.label] for w in det.windows])
        return det

    # steps
    def _step_install_shadow(self, params):
        policy = params.get("policy", "first-read-once")
        gate = params.get("gate", "boot") if policy == "boot-gated" else None
        if gate is not None:
            self.boot_detector(gate, int(params.get("partition", 0)))
        if "lbas" in params:
            ranges = [(int(a), int(n)) for a, n in params["lbas"]]
        else:
            fs = self._fs(params)
            emap = fs.resolve(params["path"])
            ranges = [tuple(r) for r in to_absolute_lbas(emap, fs.partition, self.store.block_size)]
        payload = payload_bytes(params, self.base_dir)
        rid = self.shadow.install(ShadowRule(ranges, payload, policy, gate, params.get("path", "")))
        return "installed", {"rule": rid, "ranges": [list(r) for r in ranges]}

    def _step_patch_grub(self, params):
        mode = params.get("mode", "shadow")
        if mode not in ("shadow", "in-place"):
            raise PlaybookError(f"patch-grub mode must be shadow or in-place, got {mode!r}")
        fs = self._fs(params)
        path = params.get("path") or grub.find_cfg(fs)
        plan = grub.plan_patch(fs, path)
        original, patched = plan[0], plan[1]
        if patched == original:
            return "already-patched", {"path": path}
        detail = {"path": path, "size": len(patched), "cmdline": grub.kernel_cmdline(patched)}
        if mode == "in-place":
            for (lba, _), data in plan[2]:
                self.store.raw_write(lba, data)
            if plan[3] is not None:
                self.store.raw_write(plan[3][0][0], plan[3][1])
            self._emit("grub-patched", mode=mode, **detail)
            return "patched-in-place", detail
        gate = params.get("gate", "boot")
        self.boot_detector(gate, int(params.get("partition", 0)))
        rules = [self.shadow.install(r) for r in grub.shadow_rules(plan, gate, path)]
        self._emit("grub-patched", mode=mode, rules=rules, **detail)
        return "shadow-installed", detail

    def _step_dos(self, params):
        mode = params.get("mode")
        self.store.set_mode(mode)
        self._emit("dos-triggered", mode=mode)
        return "applied", {"mode": mode}

    def _step_mine(self, params):
        rules = [MiningRule.parse(r) for r in params.get("rules", [])]
        view = StoreView(self.store)
        try:
            part = parse_partitions(view)[int(params.get("partition", 0))]
        except (DiskfsError, IndexError) as exc:
            self._emit("mine-skipped", reason=str(exc))
            return "skipped", {"ids": []}
        ids = mine_files(view, part, rules, self.quarantine, self.log)
        return "mined", {"ids": ids}

    def _step_scan_inject(self, params):
        sig = bytes.fromhex(params["signature_hex"]) if "signature_hex" in params else KERNEL_SIGNATURE
        res = scan_host_memory(self.bus, self.device_id, self.memory_size, sig,
                               int(params.get("stride", DEFAULT_STRIDE)))
        self._emit("scan", **res.to_dict())
        detail = {"hits": len(res.hits), "coverage": round(res.coverage, 6)}
        if not res.hits:
            attempts = int(params.get("retry_on_enable", 0))
            if attempts > 0:
                pid, index = self._current
                self.retries.append((pid, index, Step("scan-inject", {**params, "retry_on_enable": attempts - 1})))
                return "deferred", detail
            return "not-found", detail
        base = res.hits[0]
        target = base + int(params.get("inject_offset", PAGE))
        payload = payload_bytes(params, self.base_dir, DEFAULT_MODULE)
        out = inject_payload(self.bus, self.device_id, target, payload, self.run_host,
                             base + int(params.get("flag_offset", 0xFF0)))
        self._emit("inject", address=target, size=len(payload), **out.to_dict())
        detail.update(address=target, verified=out.verified, executed=out.executed)
        if not out.verified:
            detail["reason"] = out.reason
            return "not-verified", detail
        return "injected", detail

    def _step_exfil_event(self, params):
        note = params.get("note", "")
        channel = params.get("channel", self.quarantine.channel)
        detail = {"channel": channel, "note": note}
        peer = params.get("peer")
        if peer is not None:
            fn = self.bus.functions.get(peer)
            if fn is None or fn.mmio is None:
                raise PlaybookError(f"no peer device {peer!r} with an MMIO window")
            data = (note or "exfil").encode()[:len(fn.mmio)]
            try:
                self.bus.dma_write(self.device_id, fn.mmio_base, data)
            except DmaFault as f:
                self._emit("exfil-blocked", peer=peer, **f.to_dict())
                return "blocked", {**detail, "peer": peer}
            detail["peer"] = peer
        self._emit("exfil", **detail)
        return "sent", detail

    def _step_replace_file(self, params):
        fs = self._fs(params)
        path = params["path"]
        ino = fs.lookup(path)
        content = payload_bytes(params, self.base_dir)
        emap = fs.extent_map(ino)
        if len(content) > emap.allocated_bytes:
            raise SizeOverflow(f"{path}: {len(content)} bytes do not fit in {emap.allocated_bytes} allocated")
        ranges = to_absolute_lbas(emap, fs.partition, self.store.block_size)
        cost = int(params.get("cost_ms", 0))
        inode_blk, inode_off = grub.inode_location(fs, ino.number)
        dev_ratio = fs.block_size // self.store.block_size
        inode_lba = fs.partition.start_lba + inode_blk * dev_ratio
        bs = self.store.block_size

        def replace_file(window):
            window.sleep(cost)
            image = content.ljust(emap.allocated_bytes, b"\0")
            pos = 0
            for r in ranges:
                self.store.raw_write(r.lba, image[pos:pos + r.count * bs])
                pos += r.count * bs
            blk = bytearray(self.store.raw_read(inode_lba, dev_ratio))
            struct.pack_into("<I", blk, inode_off + 4, len(content) & 0xFFFFFFFF)
            self.store.raw_write(inode_lba, bytes(blk))
            self._emit("file-replaced", path=path, size=len(content),
                       sha256=hashlib.sha256(content).hexdigest(), at_ms=self.clock.now)

        self.hooks.append(replace_file)
        return "hook-registered", {"path": path, "cost_ms": cost}

    # controller tap
    def on_enable(self, ctrl) -> None:
        self.ctrl = ctrl
        for det in self.shadow.detectors.values():
            det.reset()
        retries, self.retries = self.retries, []
        for pid, index, step in retries:
            self._run_step(pid, index, step)

    def on_write(self, lba: int, count: int, data: bytes) -> None:
        if self.scanner is None:
            return
        for key_id, offset in self.scanner.feed(data):
            self._emit("key-match", key=key_id, offset=offset, lba=lba)
            self.on_activation(key_id)

    def on_read(self, lba: int, count: int, data: bytes) -> bytes:
        for det in self.shadow.detectors.values():
            det.observe(lba, count)
        if not self.shadow.rules:
            return data
        return self.shadow.apply(lba, count, data)

    def shutdown_hooks(self):
        hooks, self.hooks = self.hooks, []
        return hooks

    def after_command(self) -> None:
        if self.pending:
            self.run_pending()
