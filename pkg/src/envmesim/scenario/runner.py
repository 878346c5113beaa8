"""Run a scenario: build the disk, wire the testbed, play the actions, check the assertions."""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field

from ..backend import BackendError
from ..diskfs.errors import DiskfsError
from ..events import EventLog
from ..host.driver import DriverError
from ..host.trace import parse_trace, replay_trace
from ..testbed import Testbed
from .assertions import AssertionResult, evaluate
from .config import MiB, ScenarioConfig
from .imagebuilder import boot_trace, build_image

DEVICE_KEYS = ("model", "serial", "firmware", "max_queue_entries", "max_queues", "ready_latency_ms",
               "shutdown_budget_ms", "spoof", "class_code", "device_id")
HOST_KEYS = ("iommu", "cpu_vendor", "groups", "init_path", "ready_timeout_ms", "partition", "grub_paths")


@dataclass
class RunReport:
    scenario: str
    seed: int
    results: list[AssertionResult]
    log: EventLog
    duration_s: float
    manifest: dict | None = None
    log_path: str | None = None
    errors: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def summary(self) -> str:
        lines = [f"scenario {self.scenario} (seed {self.seed}): {'PASS' if self.passed else 'FAIL'}"
                 f" in {self.duration_s:.2f}s, {len(self.log)} events"]
        for r in self.results:
            lines.append(f"  [{'pass' if r.passed else 'FAIL'}] {r.name}: {r.message}")
            if not r.passed and r.first_violation is not None:
                v = r.first_violation
                lines.append(f"         first violating event #{v['seq']} {v['actor']}/{v['kind']} {v['detail']}")
        if self.log_path:
            lines.append(f"  event log: {self.log_path}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "seed": self.seed, "passed": self.passed,
                "results": [r.to_dict() for r in self.results], "events": len(self.log),
                "log": self.log_path, "duration_s": self.duration_s}


def http_cache_blob(key: bytes, key_offset: int | None = None) -> bytes:
    """A browser-cache-like record carrying ``key`` inside a cookie value."""
    head = b"HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=utf-8\r\n"
    cookie = b"Set-Cookie: sid="
    if key_offset is not None:
        pad = key_offset - len(head) - len(cookie) - len(b"X-Pad: \r\n")
        if pad < 0:
            raise ValueError(f"key offset {key_offset} too small for the cache header")
        head += b"X-Pad: " + b"a" * pad + b"\r\n"
    body = b"<html><body>" + b"cached page " * 40 + b"</body></html>\n"
    return head + cookie + key + b"; Path=/; Secure; HttpOnly\r\nCache-Control: max-age=3600\r\n\r\n" + body


class Runner:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.snapshots: dict = {}
        self.manifest = None
        dev = cfg.device
        image = None
        block_size = int(dev.get("block_size", 512))
        if cfg.image is not None:
            built = build_image(cfg.image)
            image, self.manifest = bytes(built.image), built.manifest
            block_size = cfg.image.block_size
        host = cfg.host
        backing = dev.get("backing_file")
        if backing and cfg.base_dir and not os.path.isabs(backing):
            backing = os.path.join(cfg.base_dir, backing)
        self.tb = Testbed(
            image=image, block_size=block_size, namespace_blocks=int(dev.get("namespace_blocks", 2048)),
            memory_size=int(host.get("memory_mib", 64) * MiB), seed=cfg.seed,
            device={k: dev[k] for k in DEVICE_KEYS if k in dev},
            host={k: host[k] for k in HOST_KEYS if k in host},
            keys=cfg.keys, playbooks=cfg.playbooks, detectors=cfg.detectors,
            malice={k: cfg.malice[k] for k in ("quarantine_quota", "exfil_channel") if k in cfg.malice},
            peers=host.get("peers", []), base_dir=cfg.base_dir, backing_path=backing,
            corrupt_seed=dev.get("corrupt_seed"))

    # actions
    def _data(self, a: dict) -> bytes:
        if "key" in a:
            key = next((k.pattern for k in self.cfg.keys if k.key_id == a["key"]), None)
            if key is None:
                raise ValueError(f"unknown key {a['key']!r}")
            if a.get("blob", "http-cache") == "http-cache":
                return http_cache_blob(key, a.get("key_offset"))
            return key
        if "text" in a:
            return a["text"].encode()
        if "hex" in a:
            return bytes.fromhex("".join(a["hex"].split()))
        if "file" in a:
            with open(os.path.join(self.cfg.base_dir or ".", a["file"]), "rb") as fh:
                return fh.read()
        if "random_bytes" in a:
            return hashlib.shake_256(f"data:{self.cfg.seed}:{a.get('lba')}".encode()).digest(int(a["random_bytes"]))
        raise ValueError("write needs key, text, hex, file or random_bytes")

    def act(self, i: int, a: dict) -> None:
        tb = self.tb
        host = tb.host
        kind = a["action"]
        if kind == "boot":
            host.boot()
        elif kind == "shutdown":
            host.shutdown()
        elif kind == "reboot":
            host.reboot()
        elif kind == "driver-init":
            host.driver = host.new_driver()
            host.driver.driver_init()
        elif kind == "advance":
            tb.clock.advance(int(a.get("ms", 1)))
        elif kind == "host-step":
            host.step()
        elif kind == "snapshot":
            snap = tb.store.snapshot()
            self.snapshots[a.get("name", "default")] = snap
            tb.log.emit("runner", "snapshot", name=a.get("name", "default"),
                        sha256=hashlib.sha256(snap.data).hexdigest())
        elif kind == "mutate":
            addr = int(a["address"]) if "address" in a else tb.memory.signature_addr + int(a["offset_from_signature"])
            host.script_mutation(addr, self._data(a))
        elif kind == "flush":
            host.driver.flush()
        elif kind == "write":
            data = self._data(a)
            bs = host.driver.block_size
            data = data.ljust(-(-len(data) // bs) * bs, b"\0")
            lba = int(a["lba"])
            step = int(a.get("split_blocks", 0)) * bs or len(data)
            for off in range(0, len(data), step):
                host.write(lba + off // bs, data[off:off + step])
        elif kind == "read" and "path" in a:
            rec = self._manifest_file(a["path"], int(a.get("partition", 0)))
            data = b"".join(host.read(lba, count) for lba, count in rec["lba_ranges"])[:rec["size"]]
            sha = hashlib.sha256(data).hexdigest()
            tb.log.emit("runner", "read-file", path=a["path"], sha256=sha, genuine=sha == rec["sha256"])
        elif kind == "read":
            lba, count = int(a["lba"]), int(a["count"])
            data = host.read(lba, count)
            detail = {"lba": lba, "count": count, "sha256": hashlib.sha256(data).hexdigest()}
            if "compare" in a:
                snap = self.snapshots[a["compare"]]
                bs = snap.block_size
                detail.update(snapshot=a["compare"], equal=data == snap.data[lba * bs:(lba + count) * bs])
            tb.log.emit("runner", "read-compare" if "compare" in a else "read", **detail)
        elif kind == "trace":
            if "file" in a:
                with open(os.path.join(self.cfg.base_dir or ".", a["file"]), encoding="utf-8") as fh:
                    ops = parse_trace(fh.read())
            elif a.get("boot"):
                if self.manifest is None:
                    raise ValueError("a boot trace needs an [image]")
                ops = boot_trace(self.manifest, tuple(a.get("paths", ("/boot/grub/grub.cfg", "/sbin/init"))))
            else:
                ops = parse_trace("\n".join(a.get("ops", [])))
            replay_trace(host.driver, ops, tb.log, self.cfg.base_dir)

    def _manifest_file(self, path: str, partition: int = 0) -> dict:
        if self.manifest is None:
            raise ValueError(f"{path}: scenario has no [image]")
        for f in self.manifest["partitions"][partition]["files"]:
            if f["path"] == path:
                return f
        raise KeyError(f"{path} is not in the image manifest")

    def _need_driver(self, kind: str) -> bool:
        drv = self.tb.host.driver
        if drv is None or drv.state != "ready":
            raise DriverError(f"{kind}: host driver is not ready")
        return True

    def run(self, log_path: str | None = None) -> RunReport:
        t0 = time.perf_counter()
        tb = self.tb
        errors = []
        tb.log.emit("runner", "scenario-start", name=self.cfg.name, seed=self.cfg.seed)
        for i, a in enumerate(self.cfg.actions):
            try:
                if a["action"] in ("write", "read", "trace", "flush"):
                    self._need_driver(a["action"])
                self.act(i, a)
            except (DriverError, DiskfsError, BackendError, ValueError, KeyError, RuntimeError, OSError) as exc:
                errors.append(f"action #{i + 1} ({a['action']}): {exc}")
                tb.log.emit("runner", "action-error", index=i, action=a["action"], error=str(exc))
        tb.log.emit("runner", "scenario-end", name=self.cfg.name)
        results = evaluate(self.cfg.assertions, tb, self.manifest)
        if log_path:
            tb.log.write(log_path)
        tb.close()
        return RunReport(self.cfg.name, self.cfg.seed, results, tb.log, time.perf_counter() - t0, self.manifest,
                         log_path, errors)


def run_scenario(cfg: ScenarioConfig, log_path: str | None = None) -> RunReport:
    return Runner(cfg).run(log_path)
