"""MBR and GPT partition table parsing."""

from __future__ import annotations

import struct
import uuid
import zlib
from dataclasses import dataclass

from .errors import CorruptTable, DiskfsError, NoPartitionTable

GPT_SIGNATURE = b"EFI PART"
LINUX_FS_GUID = "0fc63daf-8483-4772-8e79-3d69d8477de4"
PROTECTIVE_TYPE = 0xEE
MAX_GPT_ENTRIES = 1024
MAX_GPT_ENTRY_SIZE = 4096


@dataclass(frozen=True)
class PartitionEntry:
    index: int
    start_lba: int
    length_lbas: int
    type_tag: str
    scheme: str
    name: str = ""
    guid: str = ""

    @property
    def end_lba(self) -> int:
        return self.start_lba + self.length_lbas

    def __contains__(self, lba: int) -> bool:
        return self.start_lba <= lba < self.end_lba


def _guid(raw: bytes) -> str:
    return str(uuid.UUID(bytes_le=bytes(raw)))


def _check_overlaps(entries: list[PartitionEntry]) -> list[PartitionEntry]:
    entries = sorted(entries, key=lambda p: p.start_lba)
    for a, b in zip(entries, entries[1:]):
        if b.start_lba < a.end_lba:
            raise CorruptTable(f"partitions {a.index} and {b.index} overlap")
    return entries


def _read(view, lba: int, count: int) -> bytes:
    try:
        return view.read(lba, count)
    except DiskfsError as exc:
        raise CorruptTable(f"table points outside the device: {exc}") from None


def parse_gpt(view, header_block: bytes) -> list[PartitionEntry]:
    bs = view.block_size
    hsize, hcrc = struct.unpack_from("<II", header_block, 12)
    if not 92 <= hsize <= bs:
        raise CorruptTable(f"GPT header size {hsize} out of range")
    hdr = bytearray(header_block[:hsize])
    hdr[16:20] = bytes(4)
    if zlib.crc32(hdr) != hcrc:
        raise CorruptTable("GPT header CRC32 mismatch")
    first_usable, last_usable = struct.unpack_from("<QQ", header_block, 40)
    entries_lba, n_entries, entry_size, entries_crc = struct.unpack_from("<QIII", header_block, 72)
    if n_entries > MAX_GPT_ENTRIES or entry_size < 128 or entry_size > MAX_GPT_ENTRY_SIZE or entry_size % 8:
        raise CorruptTable(f"GPT entry array {n_entries}x{entry_size} not supported")
    total = n_entries * entry_size
    if entries_lba < 2 or entries_lba >= view.block_count:
        raise CorruptTable("GPT entry array outside the device")
    raw = _read(view, entries_lba, (total + bs - 1) // bs)[:total]
    if zlib.crc32(raw) != entries_crc:
        raise CorruptTable("GPT entry array CRC32 mismatch")
    out = []
    for i in range(n_entries):
        e = raw[i * entry_size:(i + 1) * entry_size]
        if not any(e[:16]):
            continue
        first, last = struct.unpack_from("<QQ", e, 32)
        if first < 1 or last < first:
            raise CorruptTable(f"GPT entry {i} has invalid range {first}..{last}")
        name = e[56:128].decode("utf-16-le", "replace").split("\0", 1)[0]
        out.append(PartitionEntry(i, first, last - first + 1, _guid(e[:16]), "gpt", name, _guid(e[16:32])))
    return _check_overlaps(out)


def parse_mbr(block0: bytes) -> list[PartitionEntry]:
    out = []
    for i in range(4):
        e = block0[446 + 16 * i:462 + 16 * i]
        ptype = e[4]
        start, count = struct.unpack_from("<II", e, 8)
        if ptype == 0 or ptype == PROTECTIVE_TYPE or count == 0:
            continue
        if start < 1:
            raise CorruptTable(f"MBR entry {i} starts at LBA 0")
        out.append(PartitionEntry(i, start, count, f"0x{ptype:02x}", "mbr"))
    return _check_overlaps(out)


def parse_partitions(view) -> list[PartitionEntry]:
    """Partitions of a device view, sorted by start LBA."""
    if view.block_count < 2:
        raise NoPartitionTable("device too small")
    block0 = view.read(0, 1)
    block1 = view.read(1, 1)
    if block1[:8] == GPT_SIGNATURE:
        entries = parse_gpt(view, block1)
    elif block0[510:512] == b"\x55\xaa" and (entries := parse_mbr(block0)):
        pass
    else:
        raise NoPartitionTable("no GPT header and no usable MBR entries")
    for p in entries:
        if p.end_lba > view.block_count:
            raise CorruptTable(f"partition {p.index} extends past the device end")
    return entries
