"""Shared test machinery: a bare register-level host and the randomized oracle harnesses."""

from __future__ import annotations

import random

from envmesim.backend import BlockStore
from envmesim.device import Controller, Tap
from envmesim.device import registers as R
from envmesim.device import wire as W
from envmesim.device.wire import CompletionEntry, SubmissionEntry
from envmesim.events import Clock, EventLog
from envmesim.host.iommu import Bus
from envmesim.host.driver import NvmeDriver
from envmesim.host.memory import KERNEL_SIGNATURE, HostMemory
from envmesim.malice.dma import scan_host_memory
from envmesim.malice.matcher import MatcherState, find_all, scan_write_stream
from envmesim.malice.shadow import ShadowRule, ShadowTable
from envmesim.testbed import Testbed

PAGE = 4096
MiB = 1 << 20


class RawHost:
    """Owns queue memory and talks MMIO; every wrap and phase is tracked by hand."""

    def __init__(self, *, blocks=256, block_size=512, auto_process=False, log_io=False, **ctrl_kw):
        self.log = EventLog()
        self.clock = Clock()
        self.memory = HostMemory(16 * MiB)
        self.bus = Bus(self.memory, self.log)
        self.store = BlockStore(block_size, blocks)
        self.ctrl = Controller(self.bus, self.store, self.log, self.clock, auto_process=auto_process,
                               log_io=log_io, **ctrl_kw)
        self.bus.set_bus_master("nvme0", True)
        self.qarea = self.memory.region("queue-area").start
        self.buf = self.memory.region("data-buffers").start
        self._next_page = self.qarea
        self.sq = {}  # qid -> [base, size, tail]
        self.cq = {}  # qid -> [base, size, head, phase, consumed]
        self._cid = 0

    def alloc(self, entries: int, entry_size: int) -> int:
        base = self._next_page
        self._next_page += -(-entries * entry_size // PAGE) * PAGE
        return base

    def enable(self, asq_size=4, acq_size=4) -> None:
        asq, acq = self.alloc(asq_size, W.SQE_SIZE), self.alloc(acq_size, W.CQE_SIZE)
        self.ctrl.mmio_write(R.AQA, (asq_size - 1) | ((acq_size - 1) << 16))
        self.ctrl.mmio_write(R.ASQ, asq, 8)
        self.ctrl.mmio_write(R.ACQ, acq, 8)
        self.ctrl.mmio_write(R.CC, R.CC_EN | (6 << 16) | (4 << 20))
        self.sq[0] = [asq, asq_size, 0]
        self.cq[0] = [acq, acq_size, 0, 1, 0]

    def next_cid(self) -> int:
        self._cid = (self._cid + 1) & 0xFFFF
        return self._cid

    def place(self, qid: int, entry: SubmissionEntry) -> None:
        """Write an entry at the host's tail without ringing."""
        base, size, tail = self.sq[qid]
        self.memory.write(base + W.SQE_SIZE * tail, entry.pack())
        self.sq[qid][2] = (tail + 1) % size

    def ring(self, qid: int, tail: int | None = None) -> None:
        self.ctrl.mmio_write(R.doorbell_offset(qid, False), self.sq[qid][2] if tail is None else tail)

    def reap(self, qid: int, limit: int | None = None) -> list[CompletionEntry]:
        base, size, head, phase, _ = self.cq[qid]
        out = []
        while limit is None or len(out) < limit:
            cqe = CompletionEntry.unpack(self.memory.read(base + W.CQE_SIZE * head, W.CQE_SIZE))
            if cqe.phase != phase:
                break
            out.append(cqe)
            head += 1
            if head == size:
                head, phase = 0, phase ^ 1
        if out:
            self.cq[qid][2:5] = [head, phase, self.cq[qid][4] + len(out)]
            self.ctrl.mmio_write(R.doorbell_offset(qid, True), head)
        return out

    def admin(self, entry: SubmissionEntry) -> CompletionEntry:
        self.place(0, entry)
        self.ring(0)
        self.ctrl.process()
        (cqe,) = self.reap(0)
        return cqe

    def create_io_pair(self, qid: int, sq_size: int, cq_size: int, cqid: int | None = None) -> None:
        cqid = qid if cqid is None else cqid
        if cqid not in self.cq:
            cq_base = self.alloc(cq_size, W.CQE_SIZE)
            assert self.admin(W.create_io_cq(self.next_cid(), cqid, cq_size, cq_base)).ok
            self.cq[cqid] = [cq_base, cq_size, 0, 1, 0]
        sq_base = self.alloc(sq_size, W.SQE_SIZE)
        assert self.admin(W.create_io_sq(self.next_cid(), qid, sq_size, sq_base, cqid)).ok
        self.sq[qid] = [sq_base, sq_size, 0]


QUEUE_SIZES = (2, 3, 4, 64)


def run_queue_schedule(rng, size: int, steps: int = 40) -> list[str]:
    """Drive one random submission/doorbell/reap schedule; return the violated properties."""
    h = RawHost(blocks=64)
    h.enable()
    nq = rng.randint(1, 3)
    shared = rng.random() < 0.3
    for qid in range(1, nq + 1):
        cq_size = rng.choice(QUEUE_SIZES)
        h.create_io_pair(qid, size, cq_size, cqid=1 if shared else qid)
    submitted = {q: [] for q in h.sq if q}
    outstanding = {q: 0 for q in submitted}
    rung = {q: 0 for q in submitted}
    seen = {q: [] for q in h.cq if q}
    problems = []

    def command(cid):
        kind = rng.randrange(3)
        if kind == 0:
            return SubmissionEntry(W.IO_FLUSH, cid, 1)
        op = W.IO_READ if kind == 1 else W.IO_WRITE
        return W.io_command(op, cid, rng.randrange(64), 1, prp1=h.buf + PAGE * rng.randrange(4))

    def reap_into(limit=None):
        for cqid in seen:
            for cqe in h.reap(cqid, limit):
                k = len(seen[cqid])
                if cqe.phase != 1 ^ ((k // h.cq[cqid][1]) & 1):
                    problems.append(f"phase {cqe.phase} on completion #{k} of cq {cqid}")
                seen[cqid].append(cqe)
                outstanding[cqe.sq_id] -= 1

    for _ in range(steps):
        op = rng.randrange(4)
        qid = rng.choice(list(submitted))
        if op == 0:
            for _ in range(rng.randint(1, max(1, size - 1 - outstanding[qid]))):
                if outstanding[qid] >= size - 1:
                    break
                cid = h.next_cid()
                h.place(qid, command(cid))
                submitted[qid].append(cid)
                outstanding[qid] += 1
        elif op == 1:
            unrung = (h.sq[qid][2] - rung[qid]) % size
            if unrung:
                rung[qid] = (rung[qid] + rng.randint(1, unrung)) % size
                h.ring(qid, rung[qid])
        elif op == 2:
            h.ctrl.process(rng.choice([1, 2, 4, None]))
        else:
            reap_into(rng.randint(1, 4))
    for qid in submitted:
        h.ring(qid)
    for _ in range(4 * sum(len(v) for v in submitted.values()) + 4):
        h.ctrl.process()
        reap_into()
        if all(v == 0 for v in outstanding.values()):
            break
    done = [c.cid for cs in seen.values() for c in cs]
    want = [c for cs in submitted.values() for c in cs]
    if sorted(done) != sorted(want):
        problems.append(f"completed cids {sorted(done)} != submitted {sorted(want)}")
    for qid, cids in submitted.items():
        got = [c.cid for cs in seen.values() for c in cs if c.sq_id == qid]
        if got != cids:
            problems.append(f"sq {qid} completion order {got} != submission order {cids}")
    bad = [c for cs in seen.values() for c in cs if not c.ok]
    if bad:
        problems.append(f"{len(bad)} failed commands, first {bad[0]}")
    return problems


# filesystem oracle
DIRECT_MAX = 12 * 1024
SINGLE_MAX = DIRECT_MAX + 256 * 1024
DOUBLE_MAX = SINGLE_MAX + 256 * 256 * 1024


def random_image_spec(rng, triple: bool):
    """A 1 KiB-block ext2 image whose files land in every block-map tier."""
    from envmesim.scenario.imagebuilder import FileSpec, ImageSpec, PartitionSpec

    tiers = [(0, 0), (1, DIRECT_MAX), (DIRECT_MAX + 1, SINGLE_MAX), (SINGLE_MAX + 1, 3 * MiB)]
    files = []
    for i in range(rng.randint(1, 6)):
        lo, hi = rng.choice(tiers)
        files.append(FileSpec(f"/d{i % 3}/f{i}.bin", size=rng.randint(lo, hi),
                              fill=rng.choice(["random", "random", "pattern", "zero"])))
    size = 16 * MiB
    if triple:
        files.append(FileSpec("/big/huge.bin", size=rng.randint(DOUBLE_MAX + 1, 70_000_000)))
        size = 80 * MiB
    part = PartitionSpec(files=files, fragment=rng.random() < 0.5)
    return ImageSpec(size_bytes=size, scheme=rng.choice(["gpt", "mbr"]), seed=rng.randrange(2**31),
                     partitions=[part])


def check_fs_oracle(spec, built) -> list[str]:
    """diskfs extents must equal the builder manifest and raw LBA reads must rebuild each file."""
    import hashlib

    from envmesim.diskfs import Ext2, ImageView, parse_partitions, to_absolute_lbas

    problems = []
    view = ImageView(built.image, spec.block_size)
    parts = parse_partitions(view)
    fs = Ext2(view, parts[0])
    planted = {f.path: f.materialize(spec.seed) for f in spec.partitions[0].files}
    for rec in built.manifest["partitions"][0]["files"]:
        path = rec["path"]
        emap = fs.resolve(path)
        got = [list(e) for e in emap.extents]
        if got != rec["extents"]:
            problems.append(f"{path}: extents differ from manifest")
        raw = b"".join(view.read(r.lba, r.count) for r in to_absolute_lbas(emap, parts[0], spec.block_size))
        digest = hashlib.sha256(raw[:emap.file_size]).hexdigest()
        if digest != hashlib.sha256(planted[path]).hexdigest() or digest != rec["sha256"]:
            problems.append(f"{path}: reassembled content hash mismatch")
    if len(built.manifest["partitions"][0]["files"]) != len(planted):
        problems.append("manifest file count differs from the image spec")
    return problems


# shadowing
class ShadowTap(Tap):
    def __init__(self, table):
        self.table = table

    def on_read(self, lba, count, data):
        return self.table.apply(lba, count, data)


def driver_over(image: bytes, tap=None, block_size=512):
    """A ready NvmeDriver over an in-memory copy of ``image``."""
    log, clock = EventLog(), Clock()
    mem = HostMemory(16 * MiB)
    bus = Bus(mem, log)
    store = BlockStore.from_image(image, block_size)
    ctrl = Controller(bus, store, log, clock, tap=tap, log_io=False)
    drv = NvmeDriver(ctrl, mem, bus, log, clock)
    assert drv.driver_init() == "ready"
    return drv


def _random_read(rng, blocks, near=None):
    count = rng.randint(1, 64)
    if near is not None and rng.random() < 0.5:
        lba = rng.randint(max(0, near[0] - count + 1), min(blocks - count, near[1] - 1))
    else:
        lba = rng.randrange(blocks - count + 1)
    return lba, count


def run_shadow_schedule(rng, post_ios: int = 10, blocks: int = 2048) -> list[str]:
    """Random reads over one first-read-once rule, then shadowed-vs-clean equivalence."""
    bs = 512
    image = rng.randbytes(blocks * bs)
    ranges, cur = [], rng.randrange(blocks - 200)
    for _ in range(rng.randint(1, 3)):
        n = rng.randint(1, 24)
        ranges.append((cur, n))
        cur += n + rng.randint(0, 16)
    rng.shuffle(ranges)
    payload = rng.randbytes(sum(n for _, n in ranges) * bs)
    payload_block = {}
    pos = 0
    for lba, n in ranges:
        for k in range(n):
            payload_block[lba + k] = payload[(pos + k) * bs:(pos + k + 1) * bs]
        pos += n
    table = ShadowTable(bs, blocks)
    table.install(ShadowRule(list(ranges), payload, "first-read-once"))
    shadowed, clean = driver_over(image, ShadowTap(table)), driver_over(image)
    span = (min(a for a, _ in ranges), max(a + n for a, n in ranges))
    reads = [_random_read(rng, blocks, span) for _ in range(rng.randint(5, 30))]
    lba0, n0 = rng.choice(ranges)
    reads.insert(rng.randrange(len(reads) + 1), (lba0 + rng.randrange(n0), 1))
    problems, observed, first_overlap = [], [], None
    for i, (lba, count) in enumerate(reads):
        data = shadowed.read(lba, count)
        covered = [b for b in range(lba, lba + count) if b in payload_block]
        if covered and first_overlap is None:
            first_overlap = i
        got_payload = [b for b in covered if data[(b - lba) * bs:(b - lba + 1) * bs] == payload_block[b]]
        if got_payload:
            observed.append(i)
            if got_payload != covered:
                problems.append(f"read {i} got payload in {len(got_payload)} of {len(covered)} covered blocks")
        for b in range(lba, lba + count):
            if b not in payload_block or not got_payload:
                if data[(b - lba) * bs:(b - lba + 1) * bs] != image[b * bs:(b + 1) * bs]:
                    problems.append(f"read {i} block {b} is neither genuine nor payload")
                    break
    if observed != [first_overlap]:
        problems.append(f"payload observed by reads {observed}, expected only read {first_overlap}")
    for i in range(post_ios):
        count = rng.randint(1, 64)
        lba = rng.randrange(blocks - count + 1)
        if rng.random() < 0.3:
            data = rng.randbytes(count * bs)
            shadowed.write(lba, data)
            clean.write(lba, data)
        elif shadowed.read(lba, count) != clean.read(lba, count):
            problems.append(f"post-consumption io {i} differs from the clean device")
    return problems


# matcher
_AB = bytes(0x61 + (i & 1) for i in range(256))


def random_matcher_case(rng):
    """(stream, keys, cut points) with keys planted across the cuts."""
    two_letter = rng.random() < 0.25

    def blob(n):
        raw = rng.randbytes(n)
        # low bit picks 'a' or 'b': many overlapping occurrences
        return raw.translate(_AB) if two_letter else raw

    keys = []
    while len(keys) < rng.randint(1, 16):
        k = blob(rng.randint(16, 256))
        if k not in keys:
            keys.append(k)
    size = rng.randint(0, 64 * 1024)
    stream = bytearray(blob(size))
    cuts = sorted(rng.sample(range(1, size), min(rng.randint(0, 40), max(size - 1, 0)))) if size > 1 else []
    # plant some keys so they straddle cut points, and some anywhere
    for cut in cuts:
        if rng.random() < 0.5:
            k = rng.choice(keys)
            start = cut - rng.randint(1, len(k) - 1)
            if 0 <= start and start + len(k) <= size:
                stream[start:start + len(k)] = k
    for _ in range(rng.randint(0, 8)):
        k = rng.choice(keys)
        if len(k) <= size:
            start = rng.randint(0, size - len(k))
            stream[start:start + len(k)] = k
    return bytes(stream), keys, cuts


def run_matcher_case(rng) -> list[str]:
    stream, keys, cuts = random_matcher_case(rng)
    expected = find_all(stream, keys)
    st = MatcherState.for_patterns(keys)
    got = []
    for a, b in zip([0] + cuts, cuts + [len(stream)]):
        got.extend(scan_write_stream(stream[a:b], st))
    problems = []
    if sorted(got) != expected:
        problems.append(f"{len(got)} matches reported, {len(expected)} expected")
    if got != sorted(got, key=lambda m: (m.offset + len(keys[m.key]), m.offset)):
        problems.append("matches not reported in completion order")
    return problems


# DMA isolation
def flat_search(memory: bytes, signature: bytes) -> list[int]:
    out, i = [], memory.find(signature)
    while i >= 0:
        out.append(i)
        i = memory.find(signature, i + 1)
    return out


def check_dma_isolation(image, seed: int, stride: int) -> list[str]:
    """IOMMU on: normal IO works and a kernel scan faults.  Off: scan equals a flat search."""
    problems = []
    rng = random.Random(seed)
    on = Testbed(image=bytes(image.image), block_size=image.block_size, memory_size=16 * MiB, seed=seed,
                 host={"iommu": True})
    try:
        if on.host.boot() != "running":
            return ["iommu-on host did not boot"]
        lba = rng.randrange(on.store.block_count - 8)
        data = rng.randbytes(8 * on.store.block_size)
        on.host.write(lba, data)
        if on.host.read(lba, 8) != data:
            problems.append("iommu on: read-back mismatch")
        res = scan_host_memory(on.bus, "nvme0", on.memory.size, KERNEL_SIGNATURE, stride)
        if res.faults < 1:
            problems.append("iommu on: kernel scan raised no DMA fault")
        if res.hits:
            problems.append(f"iommu on: scan saw kernel memory at {res.hits}")
    finally:
        on.close()
    off = Testbed(image=bytes(image.image), block_size=image.block_size, memory_size=16 * MiB, seed=seed)
    try:
        if off.host.boot() != "running":
            return problems + ["iommu-off host did not boot"]
        # extra copies, some straddling scan window edges
        for _ in range(rng.randint(0, 4)):
            edge = rng.randrange(1, off.memory.size // stride) * stride if off.memory.size > stride else 0
            addr = max(0, edge - rng.randint(1, len(KERNEL_SIGNATURE) - 1)) if rng.random() < 0.5 else \
                rng.randrange(off.memory.size - len(KERNEL_SIGNATURE))
            if off.memory.region_of(addr) is not None and off.memory.region_of(addr).kind == "other":
                off.memory.write(addr, KERNEL_SIGNATURE)
        res = scan_host_memory(off.bus, "nvme0", off.memory.size, KERNEL_SIGNATURE, stride)
        oracle = flat_search(bytes(off.memory.data), KERNEL_SIGNATURE)
        if res.hits != oracle:
            problems.append(f"iommu off: scan hits {res.hits} != flat search {oracle}")
        if res.faults or res.coverage != 1.0:
            problems.append("iommu off: scan was not complete")
    finally:
        off.close()
    return problems
