"""Minimal NVMe host driver: controller bring-up, admin and IO submission, polling."""

from __future__ import annotations

import struct
from dataclasses import dataclass

from ..device import registers as R
from ..device import wire as W
from ..device.controller import MAX_TRANSFER, PAGE
from ..device.wire import CompletionEntry, SubmissionEntry


class DriverError(Exception):
    pass


class IoTimeout(DriverError):
    """No completion arrived within the driver timeout (device dead or hung)."""


class IoError(DriverError):
    def __init__(self, status: int, what: str = ""):
        super().__init__(f"{what}: {W.status_name(status)}")
        self.status = status


@dataclass
class HostQueue:
    qid: int
    sq_base: int
    cq_base: int
    size: int
    sq_tail: int = 0
    sq_head: int = 0
    cq_head: int = 0
    phase: int = 1
    next_cid: int = 0

    def alloc_cid(self) -> int:
        cid = self.next_cid
        self.next_cid = (self.next_cid + 1) & 0xFFFF
        return cid


class NvmeDriver:
    ADMIN_DEPTH = 32
    IO_DEPTH = 64

    def __init__(self, ctrl, memory, bus, log, clock, *, device_id: str | None = None,
                 ready_timeout_ms: int = 500, io_timeout_ms: int = 1000, poll_ms: int = 10):
        self.ctrl = ctrl
        self.memory = memory
        self.bus = bus
        self.log = log
        self.clock = clock
        self.device_id = device_id or ctrl.device_id
        self.ready_timeout_ms = ready_timeout_ms
        self.io_timeout_ms = io_timeout_ms
        self.poll_ms = poll_ms
        self.state = "unbound"
        self.admin: HostQueue | None = None
        self.io: HostQueue | None = None
        self.model = ""
        self.namespace_blocks = 0
        self.block_size = 512
        qa = memory.region("queue-area")
        buf = memory.region("data-buffers")
        self.admin_sq_addr = qa.start
        self.admin_cq_addr = qa.start + PAGE
        self.io_sq_addr = qa.start + 2 * PAGE
        self.io_cq_addr = qa.start + 4 * PAGE
        self.prp_list_addr = qa.start + 6 * PAGE
        self.data_addr = buf.start
        self.identify_addr = buf.start + MAX_TRANSFER
        if self.identify_addr + PAGE > buf.end:
            raise ValueError("data-buffers region too small for a maximum transfer")

    def _emit(self, kind, **detail):
        return self.log.emit("host", kind, **detail)

    # register access
    def _rd(self, off, size=4):
        return self.ctrl.mmio_read(off, size)

    def _wr(self, off, value, size=4):
        self.ctrl.mmio_write(off, value, size)

    def _pump(self) -> None:
        if not self.ctrl.auto_process:
            self.ctrl.process()

    def _wait_csts(self, predicate, timeout_ms) -> bool:
        start = self.clock.now
        while True:
            if predicate(self._rd(R.CSTS)):
                return True
            if self.clock.now - start >= timeout_ms:
                return False
            self.clock.advance(self.poll_ms)

    # bring-up
    def driver_init(self) -> str:
        fn = self.bus.functions.get(self.device_id)
        if fn is None or fn.class_code != R.NVME_CLASS_CODE:
            self.state = "unbound"
            self._emit("driver-not-bound", device=self.device_id,
                       class_code=None if fn is None else f"{fn.class_code:06x}")
            return "not-bound"
        self.state = "bound"
        self.bus.set_bus_master(self.device_id, True)
        self._emit("driver-bound", device=self.device_id)
        cap = self._rd(R.CAP, 8)
        mqes = R.cap_mqes(cap)
        if self._rd(R.CC) & R.CC_EN:
            self._wr(R.CC, 0)
            self._wait_csts(lambda v: not v & R.CSTS_RDY, self.ready_timeout_ms)
        adepth = max(2, min(self.ADMIN_DEPTH, mqes))
        self.admin = HostQueue(0, self.admin_sq_addr, self.admin_cq_addr, adepth)
        self.memory.write(self.admin_sq_addr, bytes(PAGE))
        self.memory.write(self.admin_cq_addr, bytes(PAGE))
        self._wr(R.AQA, ((adepth - 1) << 16) | (adepth - 1))
        self._wr(R.ASQ, self.admin_sq_addr, 8)
        self._wr(R.ACQ, self.admin_cq_addr, 8)
        self._wr(R.CC, R.CC_EN | (6 << 16) | (4 << 20))
        if not self._wait_csts(lambda v: v & R.CSTS_RDY, self.ready_timeout_ms):
            self.state = "not-ready"
            self._emit("driver-bound-not-ready", device=self.device_id, waited_ms=self.ready_timeout_ms,
                       device_enabled=self.bus.is_enabled(self.device_id))
            return "not-ready-timeout"
        try:
            self._identify()
            iodepth = max(2, min(self.IO_DEPTH, mqes))
            self.io = HostQueue(1, self.io_sq_addr, self.io_cq_addr, iodepth)
            self.memory.write(self.io_sq_addr, bytes(2 * PAGE))
            self.memory.write(self.io_cq_addr, bytes(2 * PAGE))
            self._admin_ok(W.set_num_queues(0, 1, 1), "set features")
            self._admin_ok(W.create_io_cq(0, 1, iodepth, self.io_cq_addr), "create io cq")
            self._admin_ok(W.create_io_sq(0, 1, iodepth, self.io_sq_addr, 1), "create io sq")
        except DriverError as exc:
            self.state = "failed"
            self._emit("driver-init-failed", device=self.device_id, error=str(exc))
            return "failed"
        self.state = "ready"
        self._emit("driver-ready", device=self.device_id, model=self.model, blocks=self.namespace_blocks,
                   block_size=self.block_size)
        return "ready"

    def _identify(self) -> None:
        self._admin_ok(W.identify(0, W.CNS_CONTROLLER, self.identify_addr), "identify controller")
        d = self.memory.read(self.identify_addr, PAGE)
        self.model = d[24:64].decode("ascii", "replace").rstrip()
        self._admin_ok(W.identify(0, W.CNS_NAMESPACE, self.identify_addr, nsid=1), "identify namespace")
        d = self.memory.read(self.identify_addr, PAGE)
        self.namespace_blocks = struct.unpack_from("<Q", d, 0)[0]
        lbaf = struct.unpack_from("<I", d, 128 + 4 * (d[26] & 0xF))[0]
        self.block_size = 1 << ((lbaf >> 16) & 0xFF)

    # submission and completion
    def submit(self, q: HostQueue, entry: SubmissionEntry) -> int:
        if (q.sq_tail + 1) % q.size == q.sq_head:
            raise DriverError(f"submission queue {q.qid} full")
        entry.cid = q.alloc_cid()
        self.memory.write(q.sq_base + W.SQE_SIZE * q.sq_tail, entry.pack())
        q.sq_tail = (q.sq_tail + 1) % q.size
        self._wr(R.doorbell_offset(q.qid, False), q.sq_tail)
        return entry.cid

    def poll(self, q: HostQueue) -> CompletionEntry | None:
        """Consume the next completion if its phase tag shows it is new."""
        raw = self.memory.read(q.cq_base + W.CQE_SIZE * q.cq_head, W.CQE_SIZE)
        cqe = CompletionEntry.unpack(raw)
        if cqe.phase != q.phase:
            return None
        q.cq_head += 1
        if q.cq_head == q.size:
            q.cq_head = 0
            q.phase ^= 1
        q.sq_head = cqe.sq_head
        self._wr(R.doorbell_offset(q.qid, True), q.cq_head)
        return cqe

    def wait(self, q: HostQueue, cid: int, timeout_ms: int | None = None) -> CompletionEntry:
        timeout_ms = self.io_timeout_ms if timeout_ms is None else timeout_ms
        start = self.clock.now
        while True:
            self._pump()
            while self.ctrl.interrupts:
                self.ctrl.interrupts.popleft()
            cqe = self.poll(q)
            if cqe is not None:
                if cqe.cid == cid:
                    return cqe
                continue
            if self.clock.now - start >= timeout_ms:
                self._emit("io-timeout", qid=q.qid, cid=cid, waited_ms=timeout_ms)
                raise IoTimeout(f"no completion for cid {cid} on queue {q.qid}")
            self.clock.advance(self.poll_ms)

    def admin_cmd(self, entry: SubmissionEntry) -> CompletionEntry:
        if self.admin is None:
            raise DriverError("controller not initialised")
        cid = self.submit(self.admin, entry)
        return self.wait(self.admin, cid)

    def _admin_ok(self, entry: SubmissionEntry, what: str) -> CompletionEntry:
        cqe = self.admin_cmd(entry)
        if not cqe.ok:
            raise IoError(cqe.status, what)
        return cqe

    # data path
    def build_prps(self, buf_addr: int, length: int) -> tuple[int, int]:
        first = min(length, PAGE - buf_addr % PAGE)
        remaining = length - first
        if remaining == 0:
            return buf_addr, 0
        nxt = buf_addr + first
        if remaining <= PAGE:
            return buf_addr, nxt
        entries = list(range(nxt, nxt + remaining, PAGE))
        self.memory.write(self.prp_list_addr, struct.pack(f"<{len(entries)}Q", *entries))
        return buf_addr, self.prp_list_addr

    def host_io(self, direction: str, lba: int, count: int, buf_addr: int | None = None) -> int:
        """Issue one read or write through the IO queue; returns the completion status."""
        if self.state != "ready" or self.io is None:
            raise DriverError("driver not ready")
        buf_addr = self.data_addr if buf_addr is None else buf_addr
        opcode = {"read": W.IO_READ, "write": W.IO_WRITE}[direction]
        prp1, prp2 = self.build_prps(buf_addr, count * self.block_size)
        cid = self.submit(self.io, W.io_command(opcode, 0, lba, count, prp1, prp2))
        return self.wait(self.io, cid).status

    def flush(self) -> int:
        cid = self.submit(self.io, SubmissionEntry(W.IO_FLUSH, nsid=1))
        return self.wait(self.io, cid).status

    @property
    def max_blocks(self) -> int:
        return MAX_TRANSFER // self.block_size

    def read(self, lba: int, count: int) -> bytes:
        out = []
        while count:
            n = min(count, self.max_blocks)
            sts = self.host_io("read", lba, n)
            if sts != W.SC_SUCCESS:
                raise IoError(sts, f"read {lba}+{n}")
            out.append(self.memory.read(self.data_addr, n * self.block_size))
            lba += n
            count -= n
        return b"".join(out)

    def write(self, lba: int, data: bytes) -> None:
        bs = self.block_size
        if len(data) % bs:
            data = data + bytes(bs - len(data) % bs)
        pos = 0
        while pos < len(data):
            chunk = data[pos:pos + self.max_blocks * bs]
            self.memory.write(self.data_addr, chunk)
            n = len(chunk) // bs
            sts = self.host_io("write", lba, n)
            if sts != W.SC_SUCCESS:
                raise IoError(sts, f"write {lba}+{n}")
            lba += n
            pos += len(chunk)

    def shutdown(self) -> bool:
        """Orderly shutdown: delete IO queues, notify, wait for completion, disable."""
        if self.state == "ready" and self.io is not None:
            try:
                self._admin_ok(W.delete_io_sq(0, 1), "delete io sq")
                self._admin_ok(W.delete_io_cq(0, 1), "delete io cq")
            except DriverError:
                pass
        if self.state == "unbound":
            return False
        cc = self._rd(R.CC)
        self._wr(R.CC, (cc & ~R.CC_SHN_MASK) | (1 << R.CC_SHN_SHIFT))
        ok = self._wait_csts(lambda v: R.csts_shst(v) == R.SHST_COMPLETE, self.ready_timeout_ms)
        self._wr(R.CC, 0)
        self._emit("driver-shutdown", device=self.device_id, clean=ok)
        self.state = "unbound"
        self.io = None
        self.admin = None
        return ok
