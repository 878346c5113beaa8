"""NVMe controller model: register file, queue engine, PRP DMA and shutdown.

The controller is driven entirely by MMIO writes from the host.  With
``auto_process`` (the default) a submission doorbell write runs the
command engine to completion before returning; otherwise the owner calls
:meth:`Controller.process` explicitly, which lets tests interleave host and
device steps arbitrarily.  Commands execute one at a time, in order per
submission queue, with round-robin arbitration between queues.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from typing import Callable

from ..backend import BackendError, DeviceDead
from ..host.iommu import DmaFault
from . import registers as R
from . import wire as W
from .wire import CompletionEntry, SubmissionEntry

PAGE = 4096
MDTS = 9  # 2^9 pages per transfer
MAX_TRANSFER = PAGE << MDTS


class WindowOverrun(Exception):
    pass


class ShutdownWindow:
    """Budgeted slice of simulated time between shutdown-processing and -complete."""

    def __init__(self, budget_ms: int):
        self.budget_ms = budget_ms
        self.spent_ms = 0

    @property
    def remaining_ms(self) -> int:
        return self.budget_ms - self.spent_ms

    def sleep(self, ms: int) -> None:
        if self.spent_ms + ms > self.budget_ms:
            self.spent_ms = self.budget_ms
            raise WindowOverrun(f"hook needs {ms} ms, {self.remaining_ms} ms left")
        self.spent_ms += ms


class Tap:
    """Hooks the firmware exposes for extra functionality; the default is inert."""

    def on_enable(self, ctrl: "Controller") -> None:
        pass

    def on_reset(self, ctrl: "Controller") -> None:
        pass

    def on_write(self, lba: int, count: int, data: bytes) -> None:
        pass

    def on_read(self, lba: int, count: int, data: bytes) -> bytes:
        return data

    def shutdown_hooks(self) -> list[Callable[[ShutdownWindow], None]]:
        return []

    def after_command(self) -> None:
        pass


@dataclass
class SubmissionQueue:
    qid: int
    base: int
    size: int
    cqid: int
    head: int = 0
    tail: int = 0
    stalled: bool = False

    @property
    def pending(self) -> int:
        return (self.tail - self.head) % self.size


@dataclass
class CompletionQueue:
    qid: int
    base: int
    size: int
    tail: int = 0
    head: int = 0
    phase: int = 1
    posted: int = 0

    @property
    def full(self) -> bool:
        return (self.tail + 1) % self.size == self.head


@dataclass(frozen=True)
class QueuePair:
    """A submission queue together with the completion queue it reports to."""
    sq: SubmissionQueue
    cq: CompletionQueue

    @property
    def qid(self) -> int:
        return self.sq.qid

    @property
    def kind(self) -> str:
        return "admin" if self.sq.qid == 0 else "io"


class _PrpError(Exception):
    pass


class Controller:
    def __init__(self, bus, backend, log, clock, *, device_id: str = "nvme0",
                 model: str = "eNVMe research drive", serial: str = "ENVME0001",
                 firmware: str = "ENV0.1.0", max_queue_entries: int = 1024, max_queues: int = 16,
                 ready_latency_ms: int = 0, shutdown_budget_ms: int = 2000, spoof: str | None = None,
                 class_code: int = R.NVME_CLASS_CODE, auto_process: bool = True, tap: Tap | None = None,
                 log_io: bool = True):
        if spoof not in (None, "none", "never-ready"):
            raise ValueError(f"unknown spoof policy {spoof!r}")
        self.bus = bus
        self.backend = backend
        self.log = log
        self.clock = clock
        self.device_id = device_id
        self.model = model
        self.serial = serial
        self.firmware = firmware
        self.max_queues = max_queues
        self.ready_latency_ms = ready_latency_ms
        self.shutdown_budget_ms = shutdown_budget_ms
        self.spoof = None if spoof in (None, "none") else spoof
        self.auto_process = auto_process
        self.tap = tap or Tap()
        self.log_io = log_io
        self.regs = R.ControllerRegisters(cap=R.cap_value(max_queue_entries), class_code=class_code)
        self.sqs: dict[int, SubmissionQueue] = {}
        self.cqs: dict[int, CompletionQueue] = {}
        self.interrupts: deque[int] = deque()
        self.num_queues = (0, 0)
        self.dead = False
        self.completions = 0
        self._generation = 0
        self._rr = 0
        self._busy = False
        self.shutdown_hooks: list[Callable[[ShutdownWindow], None]] = []
        bus.attach(device_id, class_code)

    # helpers
    @property
    def mqes(self) -> int:
        return R.cap_mqes(self.regs.cap)

    @property
    def block_size(self) -> int:
        return self.backend.block_size

    @property
    def namespace_blocks(self) -> int:
        return self.backend.block_count

    def _emit(self, kind, **detail):
        return self.log.emit("device", kind, **detail)

    def _access_error(self, offset, mode, why):
        self._emit("access-error", offset=offset, mode=mode, reason=why)

    # MMIO
    def _locate(self, offset: int, size: int):
        for name, (off, width, writable) in R.REGISTER_MAP.items():
            if off <= offset < off + width:
                if offset + size > off + width:
                    return None
                return name, off, width, writable
        return None

    def _reg_value(self, name: str) -> int:
        if name == "CSTS":
            return self.regs.csts
        if name == "INTMC":  # reads back the mask, like INTMS
            return self.regs.intms
        if name == "NSSR":
            return 0
        return getattr(self.regs, name.lower())

    def mmio_read(self, offset: int, size: int = 4) -> int:
        if size not in (4, 8) or offset % size:
            self._access_error(offset, "read", "unaligned")
            return 0
        if offset >= R.DOORBELL_BASE:
            self._access_error(offset, "read", "doorbells are write-only")
            return 0
        loc = self._locate(offset, size)
        if loc is None:
            self._access_error(offset, "read", "out of register map")
            return 0
        if self.spoof == "never-ready":
            return 0
        name, off, width, _ = loc
        value = self._reg_value(name)
        shift = (offset - off) * 8
        return (value >> shift) & ((1 << (size * 8)) - 1)

    def mmio_write(self, offset: int, value: int, size: int = 4) -> None:
        if size not in (4, 8) or offset % size:
            self._access_error(offset, "write", "unaligned")
            return
        if offset >= R.DOORBELL_BASE:
            if size != 4:
                self._access_error(offset, "write", "doorbells are 32-bit")
                return
            self._doorbell_write(offset, value)
            return
        loc = self._locate(offset, size)
        if loc is None:
            self._access_error(offset, "write", "out of register map")
            return
        name, off, width, writable = loc
        if not writable:
            self._emit("ro-write-ignored", register=name, value=value)
            return
        shift = (offset - off) * 8
        mask = ((1 << (size * 8)) - 1) << shift
        old = self._reg_value(name)
        new = (old & ~mask) | ((value << shift) & mask)
        if name == "CC":
            self._write_cc(old, new)
        elif name in ("AQA", "ASQ", "ACQ", "INTMS"):
            setattr(self.regs, name.lower(), new)
        elif name == "INTMC":
            self.regs.intms &= ~new
        # NSSR writes are accepted and ignored (no subsystem reset support)

    def _write_cc(self, old: int, new: int) -> None:
        self.regs.cc = new
        was_en, is_en = bool(old & R.CC_EN), bool(new & R.CC_EN)
        if was_en and not is_en:
            self._reset()
        elif is_en and not was_en:
            self._enable()
        old_shn = (old & R.CC_SHN_MASK) >> R.CC_SHN_SHIFT
        new_shn = (new & R.CC_SHN_MASK) >> R.CC_SHN_SHIFT
        if new_shn and not old_shn:
            self.safe_window(new_shn)

    def _enable(self) -> None:
        self._generation += 1
        regs = self.regs
        asqs = (regs.aqa & 0xFFF) + 1
        acqs = ((regs.aqa >> 16) & 0xFFF) + 1
        self._emit("controller-enable", asq=regs.asq, acq=regs.acq, asqs=asqs, acqs=acqs)
        if self.dead:
            regs.csts |= R.CSTS_CFS
            self._emit("enable-refused", reason="device dead")
            return
        if asqs < 2 or acqs < 2 or asqs > self.mqes or acqs > self.mqes or regs.asq % PAGE or regs.acq % PAGE:
            regs.csts |= R.CSTS_CFS
            self._emit("enable-refused", reason="invalid admin queue attributes")
            return
        self.cqs = {0: CompletionQueue(0, regs.acq, acqs)}
        self.sqs = {0: SubmissionQueue(0, regs.asq, asqs, 0)}
        self.tap.on_enable(self)
        if self.spoof == "never-ready":
            self._emit("spoof-never-ready", class_code=regs.class_code)
        elif self.ready_latency_ms <= 0:
            self._become_ready(self._generation)
        else:
            gen = self._generation
            self.clock.call_later(self.ready_latency_ms, lambda: self._become_ready(gen))
        self.tap.after_command()

    def _become_ready(self, generation: int) -> None:
        if generation != self._generation or not self.regs.enabled or self.dead:
            return
        self.regs.csts |= R.CSTS_RDY
        self._emit("ready")

    def _reset(self) -> None:
        self._generation += 1
        self.sqs.clear()
        self.cqs.clear()
        self.interrupts.clear()
        self.num_queues = (0, 0)
        self.regs.csts &= ~(R.CSTS_RDY | R.CSTS_SHST_MASK)
        if self.dead:
            self.regs.csts |= R.CSTS_CFS
        self._emit("controller-reset")
        self.tap.on_reset(self)

    @property
    def ready(self) -> bool:
        return self.regs.ready and not self.dead

    # shutdown
    def safe_window(self, shn: int = 1) -> ShutdownWindow:
        """Run the shutdown sequence, giving registered hooks a budgeted window."""
        window = ShutdownWindow(self.shutdown_budget_ms)
        self.regs.set_shst(R.SHST_PROCESSING)
        self._emit("shutdown-processing", shn=shn, budget_ms=window.budget_ms)
        hooks = list(self.shutdown_hooks) + list(self.tap.shutdown_hooks())
        for hook in hooks:
            name = getattr(hook, "__name__", type(hook).__name__)
            try:
                hook(window)
            except WindowOverrun as exc:
                self._emit("window-overrun", hook=name, budget_ms=window.budget_ms, reason=str(exc))
                break
            except Exception as exc:  # a failing hook must not wedge the host's shutdown
                self._emit("hook-error", hook=name, error=repr(exc))
        self.clock.advance(window.spent_ms)
        self.regs.set_shst(R.SHST_COMPLETE)
        self._emit("shutdown-complete", spent_ms=window.spent_ms)
        return window

    # doorbells
    def _doorbell_write(self, offset: int, value: int) -> None:
        stride = 4 << R.cap_dstrd(self.regs.cap)
        rel = offset - R.DOORBELL_BASE
        if rel % stride:
            self._access_error(offset, "write", "between doorbells")
            return
        idx = rel // stride
        qid, is_cq = divmod(idx, 2)
        if not self.ready:
            self._emit("doorbell-ignored", qid=qid, completion=bool(is_cq), reason="not ready")
            return
        if is_cq:
            self.cq_head_doorbell(qid, value)
        else:
            self.ring_doorbell(qid, value)

    def ring_doorbell(self, qid: int, new_tail: int) -> int:
        """Record a new submission-queue tail; returns how many entries became fetchable."""
        sq = self.sqs.get(qid)
        if sq is None:
            self._emit("doorbell-unknown-queue", qid=qid, value=new_tail)
            return 0
        if not 0 <= new_tail < sq.size:
            self._emit("doorbell-error", qid=qid, value=new_tail, size=sq.size)
            return 0
        sq.tail = new_tail
        sq.stalled = False
        if self.auto_process:
            self.process()
        return sq.pending

    def cq_head_doorbell(self, qid: int, new_head: int) -> None:
        cq = self.cqs.get(qid)
        if cq is None:
            self._emit("doorbell-unknown-queue", qid=qid, value=new_head, completion=True)
            return
        if not 0 <= new_head < cq.size:
            self._emit("doorbell-error", qid=qid, value=new_head, size=cq.size, completion=True)
            return
        cq.head = new_head
        if self.auto_process:
            self.process()

    # command engine
    def _next_queue(self) -> SubmissionQueue | None:
        qids = sorted(self.sqs)
        if not qids:
            return None
        n = len(qids)
        start = 0
        for i, q in enumerate(qids):
            if q >= self._rr:
                start = i
                break
        for k in range(n):
            sq = self.sqs[qids[(start + k) % n]]
            cq = self.cqs.get(sq.cqid)
            if sq.pending and not sq.stalled and cq is not None and not cq.full:
                self._rr = sq.qid + 1
                return sq
        return None

    def process(self, budget: int | None = None) -> int:
        """Fetch, execute and complete up to ``budget`` commands."""
        if self._busy:
            return 0
        self._busy = True
        done = 0
        try:
            while (budget is None or done < budget) and self.ready:
                sq = self._next_queue()
                if sq is None:
                    break
                entry = self.fetch_submission(sq.qid)
                if entry is None:
                    continue
                if sq.qid == 0:
                    cqe = self.execute_admin(entry)
                else:
                    cqe = self.execute_io(entry)
                done += 1
                if cqe is not None:
                    live = self.sqs.get(sq.qid)
                    cqe.sq_id = sq.qid
                    cqe.sq_head = live.head if live is not None else sq.head
                    cqe.cid = entry.cid
                    self.post_completion(sq.cqid, cqe)
                self.tap.after_command()
        finally:
            self._busy = False
        return done

    def fetch_submission(self, qid: int) -> SubmissionEntry | None:
        sq = self.sqs[qid]
        if sq.head == sq.tail:
            return None
        addr = sq.base + W.SQE_SIZE * sq.head
        try:
            raw = self.bus.dma_read(self.device_id, addr, W.SQE_SIZE)
        except DmaFault as fault:
            sq.stalled = True
            self._emit("io-page-fault", stage="fetch", qid=qid, slot=sq.head, **fault.to_dict())
            if sq.cqid in self.cqs and not self.cqs[sq.cqid].full:
                self.post_completion(sq.cqid, CompletionEntry(status=W.SC_INTERNAL_ERROR, sq_head=sq.head,
                                                              sq_id=qid, cid=0xFFFF))
            return None
        sq.head = (sq.head + 1) % sq.size
        return SubmissionEntry.unpack(raw)

    def post_completion(self, qid: int, cqe: CompletionEntry) -> bool:
        cq = self.cqs.get(qid)
        if cq is None:
            self._emit("completion-dropped", qid=qid, cid=cqe.cid, reason="no such completion queue")
            return False
        if cq.full:
            self._emit("cq-overflow", qid=qid, cid=cqe.cid, tail=cq.tail, head=cq.head)
            return False
        cqe.phase = cq.phase
        try:
            self.bus.dma_write(self.device_id, cq.base + W.CQE_SIZE * cq.tail, cqe.pack())
        except DmaFault as fault:
            self._emit("io-page-fault", stage="completion", qid=qid, cid=cqe.cid, **fault.to_dict())
            return False
        cq.tail += 1
        if cq.tail == cq.size:
            cq.tail = 0
            cq.phase ^= 1
        cq.posted += 1
        self.completions += 1
        self.interrupts.append(qid)
        return True

    # PRP data movement
    def _prp_segments(self, prp1: int, prp2: int, length: int) -> list[tuple[int, int]]:
        first = min(length, PAGE - prp1 % PAGE)
        segs = [(prp1, first)]
        remaining = length - first
        if remaining == 0:
            return segs
        if remaining <= PAGE:
            if prp2 % PAGE:
                raise _PrpError("PRP2 entry is not page aligned")
            segs.append((prp2, remaining))
            return segs
        n = -(-remaining // PAGE)
        if prp2 % 8:
            raise _PrpError("PRP list pointer is not qword aligned")
        if n > (PAGE - prp2 % PAGE) // 8:
            raise _PrpError("transfer needs a chained PRP list")
        entries = struct.unpack(f"<{n}Q", self.bus.dma_read(self.device_id, prp2, 8 * n))
        for e in entries:
            if e % PAGE:
                raise _PrpError("PRP list entry is not page aligned")
            chunk = min(PAGE, remaining)
            segs.append((e, chunk))
            remaining -= chunk
        return segs

    def _dma_to_host(self, entry: SubmissionEntry, data: bytes) -> None:
        pos = 0
        for addr, n in self._prp_segments(entry.prp1, entry.prp2, len(data)):
            self.bus.dma_write(self.device_id, addr, data[pos:pos + n])
            pos += n

    def _dma_from_host(self, entry: SubmissionEntry, length: int) -> bytes:
        parts = [self.bus.dma_read(self.device_id, a, n) for a, n in self._prp_segments(entry.prp1, entry.prp2, length)]
        return b"".join(parts)

    # admin command set
    def identify_controller(self) -> bytes:
        d = bytearray(4096)
        struct.pack_into("<HH", d, 0, 0x1E5E, 0x1E5E)
        d[4:24] = self.serial.encode("ascii")[:20].ljust(20)
        d[24:64] = self.model.encode("ascii")[:40].ljust(40)
        d[64:72] = self.firmware.encode("ascii")[:8].ljust(8)
        d[77] = MDTS
        struct.pack_into("<I", d, 80, self.regs.vs)
        d[512] = 0x66
        d[513] = 0x44
        struct.pack_into("<I", d, 516, 1)
        return bytes(d)

    def identify_namespace(self) -> bytes:
        d = bytearray(4096)
        n = self.namespace_blocks
        struct.pack_into("<QQQ", d, 0, n, n, n)
        d[25] = 0
        d[26] = 0
        struct.pack_into("<I", d, 128, (self.block_size.bit_length() - 1) << 16)
        return bytes(d)

    def _probe(self, base: int, length: int) -> bool:
        try:
            self.bus.dma_read(self.device_id, base, length)
            return True
        except DmaFault:
            return False

    def execute_admin(self, e: SubmissionEntry) -> CompletionEntry:
        op = e.opcode
        sts, result = W.SC_SUCCESS, 0
        if op == W.ADM_IDENTIFY:
            cns = e.cdw10 & 0xFF
            if cns == W.CNS_CONTROLLER:
                data = self.identify_controller()
            elif cns == W.CNS_NAMESPACE:
                data = self.identify_namespace() if e.nsid == 1 else None
                if data is None:
                    sts = W.SC_INVALID_NAMESPACE
            elif cns == W.CNS_ACTIVE_NS_LIST:
                data = struct.pack("<I", 1) + bytes(4092)
            else:
                data, sts = None, W.SC_INVALID_FIELD
            if data is not None:
                sts = self._transfer_out(e, data)
        elif op == W.ADM_CREATE_IO_CQ:
            sts = self._create_cq(e)
        elif op == W.ADM_CREATE_IO_SQ:
            sts = self._create_sq(e)
        elif op == W.ADM_DELETE_IO_SQ:
            qid = e.cdw10 & 0xFFFF
            if qid == 0 or qid not in self.sqs:
                sts = W.SC_INVALID_QID
            else:
                del self.sqs[qid]
        elif op == W.ADM_DELETE_IO_CQ:
            qid = e.cdw10 & 0xFFFF
            if qid == 0 or qid not in self.cqs:
                sts = W.SC_INVALID_QID
            elif any(sq.cqid == qid for sq in self.sqs.values()):
                sts = W.SC_INVALID_QUEUE_DELETION
            else:
                del self.cqs[qid]
        elif op in (W.ADM_SET_FEATURES, W.ADM_GET_FEATURES):
            if e.cdw10 & 0xFF != W.FEAT_NUM_QUEUES:
                sts = W.SC_INVALID_FIELD
            elif op == W.ADM_SET_FEATURES:
                nsq, ncq = e.cdw11 & 0xFFFF, e.cdw11 >> 16
                if nsq == 0xFFFF or ncq == 0xFFFF:
                    sts = W.SC_INVALID_FIELD
                else:
                    cap = self.max_queues - 2
                    self.num_queues = (min(nsq, cap), min(ncq, cap))
                    result = self.num_queues[0] | (self.num_queues[1] << 16)
            else:
                result = self.num_queues[0] | (self.num_queues[1] << 16)
        elif op == W.ADM_GET_LOG_PAGE:
            numd = ((e.cdw10 >> 16) & 0xFFF) + 1
            sts = self._transfer_out(e, bytes(4 * numd))
        else:
            sts = W.SC_INVALID_OPCODE
        if self.log_io:
            self._emit("admin", opcode=op, cid=e.cid, status=W.status_name(sts))
        return CompletionEntry(result=result, status=sts)

    def _transfer_out(self, e: SubmissionEntry, data: bytes) -> int:
        try:
            self._dma_to_host(e, data)
        except _PrpError:
            return W.SC_INVALID_FIELD
        except DmaFault:
            return W.SC_DATA_TRANSFER_ERROR
        return W.SC_SUCCESS

    def _queue_params(self, e: SubmissionEntry):
        qid = e.cdw10 & 0xFFFF
        size = (e.cdw10 >> 16) + 1
        return qid, size

    def _create_cq(self, e: SubmissionEntry) -> int:
        qid, size = self._queue_params(e)
        if qid == 0 or qid >= self.max_queues or qid in self.cqs:
            return W.SC_INVALID_QID
        if size < 2 or size > self.mqes:
            return W.SC_INVALID_QSIZE
        if not e.cdw11 & 1 or e.prp1 % PAGE:
            return W.SC_INVALID_FIELD
        if not self._probe(e.prp1, size * W.CQE_SIZE):
            return W.SC_INTERNAL_ERROR
        self.cqs[qid] = CompletionQueue(qid, e.prp1, size)
        return W.SC_SUCCESS

    def _create_sq(self, e: SubmissionEntry) -> int:
        qid, size = self._queue_params(e)
        cqid = e.cdw11 >> 16
        if qid == 0 or qid >= self.max_queues or qid in self.sqs:
            return W.SC_INVALID_QID
        if size < 2 or size > self.mqes:
            return W.SC_INVALID_QSIZE
        if cqid == 0 or cqid not in self.cqs:
            return W.SC_CQ_INVALID
        if not e.cdw11 & 1 or e.prp1 % PAGE:
            return W.SC_INVALID_FIELD
        if not self._probe(e.prp1, size * W.SQE_SIZE):
            return W.SC_INTERNAL_ERROR
        self.sqs[qid] = SubmissionQueue(qid, e.prp1, size, cqid)
        return W.SC_SUCCESS

    def queue_pair(self, qid: int) -> QueuePair:
        sq = self.sqs[qid]
        return QueuePair(sq, self.cqs[sq.cqid])

    # NVM command set
    def _die(self, exc: Exception) -> None:
        if not self.dead:
            self.dead = True
            self.regs.csts = (self.regs.csts & ~R.CSTS_RDY) | R.CSTS_CFS
            self._emit("device-dead", reason=str(exc))

    def execute_io(self, e: SubmissionEntry) -> CompletionEntry | None:
        op = e.opcode
        if op == W.IO_FLUSH:
            if e.nsid not in (1, 0xFFFFFFFF):
                return CompletionEntry(status=W.SC_INVALID_NAMESPACE)
            try:
                self.backend.flush()
            except DeviceDead as exc:
                self._die(exc)
                return None
            return CompletionEntry(status=W.SC_SUCCESS)
        if op not in (W.IO_READ, W.IO_WRITE):
            return CompletionEntry(status=W.SC_INVALID_OPCODE)
        if e.nsid != 1:
            return CompletionEntry(status=W.SC_INVALID_NAMESPACE)
        lba, nlb = e.slba, e.nlb
        name = "read" if op == W.IO_READ else "write"
        if lba + nlb > self.namespace_blocks:
            sts = W.SC_LBA_OUT_OF_RANGE
        elif nlb * self.block_size > MAX_TRANSFER:
            sts = W.SC_INVALID_FIELD
        else:
            try:
                sts = self._read(e, lba, nlb) if op == W.IO_READ else self._write(e, lba, nlb)
            except DeviceDead as exc:
                self._die(exc)
                if self.log_io:
                    self._emit("io", op=name, lba=lba, count=nlb, cid=e.cid, status="discarded")
                return None
        if self.log_io:
            self._emit("io", op=name, lba=lba, count=nlb, cid=e.cid, status=W.status_name(sts))
        return CompletionEntry(status=sts)

    def _read(self, e: SubmissionEntry, lba: int, nlb: int) -> int:
        try:
            data = self.backend.read_blocks(lba, nlb)
        except DeviceDead:
            raise
        except BackendError:
            return W.SC_INTERNAL_ERROR
        data = self.tap.on_read(lba, nlb, data)
        try:
            self._dma_to_host(e, data)
        except _PrpError:
            return W.SC_INVALID_FIELD
        except DmaFault as fault:
            self._emit("io-page-fault", stage="data", **fault.to_dict())
            return W.SC_DATA_TRANSFER_ERROR
        return W.SC_SUCCESS

    def _write(self, e: SubmissionEntry, lba: int, nlb: int) -> int:
        try:
            data = self._dma_from_host(e, nlb * self.block_size)
        except _PrpError:
            return W.SC_INVALID_FIELD
        except DmaFault as fault:
            self._emit("io-page-fault", stage="data", **fault.to_dict())
            return W.SC_DATA_TRANSFER_ERROR
        self.tap.on_write(lba, nlb, data)
        try:
            self.backend.write_blocks(lba, nlb, data)
        except DeviceDead:
            raise
        except BackendError:
            return W.SC_INTERNAL_ERROR
        return W.SC_SUCCESS
