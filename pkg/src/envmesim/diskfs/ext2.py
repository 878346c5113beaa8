"""Read-only ext2 resolver: path -> inode -> block pointers -> extents.

Handles revision 0 and 1 filesystems with 1, 2 or 4 KiB blocks, direct and
single/double/triple indirect pointers, and sparse files (holes read as
zeros).  Anything needing the extent tree, journal recovery or 64-bit
descriptors is refused as unsupported.
"""

from __future__ import annotations

import posixpath
import stat
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import AlignmentError, CorruptFilesystem, NotFound, UnsupportedFilesystem, UnsupportedLink
from .partitions import PartitionEntry
from .view import read_bytes

EXT2_MAGIC = 0xEF53
ROOT_INODE = 2
N_DIRECT = 12
INCOMPAT_FILETYPE = 0x0002
INCOMPAT_FLEX_BG = 0x0200
SUPPORTED_INCOMPAT = INCOMPAT_FILETYPE | INCOMPAT_FLEX_BG
EXTENTS_FL = 0x80000


class Extent(NamedTuple):
    block: int    # partition-relative filesystem block
    count: int
    logical: int  # first file block covered


class LbaRange(NamedTuple):
    lba: int
    count: int


@dataclass
class ExtentMap:
    file_size: int
    extents: list[Extent]
    fs_block_size: int
    inode: int = 0

    @property
    def allocated_bytes(self) -> int:
        return sum(e.count for e in self.extents) * self.fs_block_size


@dataclass
class Inode:
    number: int
    mode: int
    size: int
    links: int
    flags: int
    blocks: tuple
    raw: bytes = field(repr=False, default=b"")

    @property
    def is_dir(self) -> bool:
        return stat.S_ISDIR(self.mode)

    @property
    def is_reg(self) -> bool:
        return stat.S_ISREG(self.mode)

    @property
    def is_link(self) -> bool:
        return stat.S_ISLNK(self.mode)


def merge_runs(pairs) -> list[Extent]:
    """Merge (logical, physical) pairs into maximal runs contiguous in both."""
    out: list[Extent] = []
    for logical, phys in pairs:
        if out:
            last = out[-1]
            if last.logical + last.count == logical and last.block + last.count == phys:
                out[-1] = Extent(last.block, last.count + 1, last.logical)
                continue
        out.append(Extent(phys, 1, logical))
    return out


class Ext2:
    def __init__(self, view, partition: PartitionEntry):
        self.view = view
        self.partition = partition
        self.part_bytes = partition.length_lbas * view.block_size
        sb = self.read_part(1024, 1024)
        if len(sb) < 1024 or struct.unpack_from("<H", sb, 56)[0] != EXT2_MAGIC:
            raise UnsupportedFilesystem("no ext2 superblock magic at offset 1024")
        (self.inodes_count, self.blocks_count, _, _, _, self.first_data_block, log_bs, _,
         self.blocks_per_group, _, self.inodes_per_group) = struct.unpack_from("<11I", sb, 0)
        self.rev_level = struct.unpack_from("<I", sb, 76)[0]
        if log_bs > 6:
            raise UnsupportedFilesystem(f"block size 2^{10 + log_bs} not supported")
        self.block_size = 1024 << log_bs
        if self.rev_level >= 1:
            self.first_ino, self.inode_size = struct.unpack_from("<IH", sb, 84)
            self.compat, self.incompat, self.ro_compat = struct.unpack_from("<III", sb, 92)
        else:
            self.first_ino, self.inode_size = 11, 128
            self.compat = self.incompat = self.ro_compat = 0
        if self.incompat & ~SUPPORTED_INCOMPAT:
            raise UnsupportedFilesystem(f"incompatible features 0x{self.incompat:x}")
        if self.inode_size < 128 or self.inode_size & (self.inode_size - 1) or self.inode_size > self.block_size:
            raise CorruptFilesystem(f"bad inode size {self.inode_size}")
        if not self.blocks_per_group or not self.inodes_per_group:
            raise CorruptFilesystem("zero blocks or inodes per group")
        if self.blocks_count * self.block_size > self.part_bytes:
            raise CorruptFilesystem("filesystem larger than its partition")
        self.group_count = -(-(self.blocks_count - self.first_data_block) // self.blocks_per_group)
        if self.inodes_count > self.group_count * self.inodes_per_group:
            raise CorruptFilesystem("inode count exceeds group capacity")
        self.filetype = bool(self.incompat & INCOMPAT_FILETYPE)
        gdt = self.read_part((self.first_data_block + 1) * self.block_size, 32 * self.group_count)
        self.inode_tables = [struct.unpack_from("<I", gdt, 32 * g + 8)[0] for g in range(self.group_count)]
        self._ppb = self.block_size // 4

    # raw access
    def read_part(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > self.part_bytes:
            raise CorruptFilesystem(f"access [{offset}, {offset + length}) outside the partition")
        return read_bytes(self.view, self.partition.start_lba * self.view.block_size + offset, length)

    def read_block(self, block: int, count: int = 1) -> bytes:
        if block <= 0 or block + count > self.blocks_count:
            raise CorruptFilesystem(f"block {block} outside the filesystem")
        return self.read_part(block * self.block_size, count * self.block_size)

    # layout facts used by the boot detector
    @property
    def superblock_lba(self) -> int:
        return self.partition.start_lba + 1024 // self.view.block_size

    def inode_table_window(self, group: int = 0) -> LbaRange:
        per_block = self.block_size // self.inode_size
        blocks = -(-self.inodes_per_group // per_block)
        ratio = self.block_size // self.view.block_size
        return LbaRange(self.partition.start_lba + self.inode_tables[group] * ratio, blocks * ratio)

    # inodes
    def inode(self, number: int) -> Inode:
        if not 1 <= number <= self.inodes_count:
            raise CorruptFilesystem(f"inode {number} out of range")
        group, index = divmod(number - 1, self.inodes_per_group)
        raw = self.read_part(self.inode_tables[group] * self.block_size + index * self.inode_size, 128)
        mode, _, size_lo = struct.unpack_from("<HHI", raw, 0)
        links = struct.unpack_from("<H", raw, 26)[0]
        flags = struct.unpack_from("<I", raw, 32)[0]
        blocks = struct.unpack_from("<15I", raw, 40)
        size = size_lo
        if stat.S_ISREG(mode) and self.rev_level >= 1:
            size |= struct.unpack_from("<I", raw, 108)[0] << 32
        return Inode(number, mode, size, links, flags, blocks, raw)

    def _pointers(self, block: int) -> np.ndarray:
        return np.frombuffer(self.read_block(block), dtype="<u4")

    def block_pairs(self, ino: Inode) -> list[tuple[int, int]]:
        """(file block, fs block) for every allocated block inside i_size."""
        if ino.flags & EXTENTS_FL:
            raise UnsupportedFilesystem(f"inode {ino.number} uses extents")
        nblocks = -(-ino.size // self.block_size)
        out: list[tuple[int, int]] = []
        ppb = self._ppb

        def walk(ptr: int, depth: int, logical: int) -> None:
            # depth 0 is a data block; each level covers ppb**depth file blocks
            if logical >= nblocks or ptr == 0:
                return
            if ptr >= self.blocks_count:
                raise CorruptFilesystem(f"inode {ino.number}: pointer {ptr} beyond filesystem")
            if depth == 0:
                out.append((logical, ptr))
                return
            span = ppb ** (depth - 1)
            for i, child in enumerate(self._pointers(ptr).tolist()):
                start = logical + i * span
                if start >= nblocks:
                    break
                walk(child, depth - 1, start)

        for i in range(N_DIRECT):
            walk(ino.blocks[i], 0, i)
        base = N_DIRECT
        for depth in (1, 2, 3):
            walk(ino.blocks[N_DIRECT + depth - 1], depth, base)
            base += ppb ** depth
        return out

    def extent_map(self, ino: Inode) -> ExtentMap:
        return ExtentMap(ino.size, merge_runs(self.block_pairs(ino)), self.block_size, ino.number)

    # directories
    def read_inode_data(self, ino: Inode) -> bytes:
        buf = bytearray(ino.size)
        bs = self.block_size
        for ext in self.extent_map(ino).extents:
            off = ext.logical * bs
            chunk = self.read_block(ext.block, ext.count)
            n = min(len(chunk), ino.size - off)
            buf[off:off + n] = chunk[:n]
        return bytes(buf)

    def list_dir(self, ino: Inode) -> list[tuple[str, int, int]]:
        """(name, inode, file type) entries; file type 0 when the feature is off."""
        if ino.is_link or not ino.is_dir:
            raise NotFound(f"inode {ino.number} is not a directory")
        data = self.read_inode_data(ino)
        out = []
        bs = self.block_size
        for base in range(0, len(data), bs):
            pos = base
            end = min(base + bs, len(data))
            while pos + 8 <= end:
                inum, rec_len, name_len, ftype = struct.unpack_from("<IHBB", data, pos)
                if not self.filetype:
                    name_len |= ftype << 8
                    ftype = 0
                if rec_len < 8 or pos + rec_len > end or 8 + name_len > rec_len:
                    raise CorruptFilesystem(f"directory inode {ino.number}: bad entry at {pos}")
                if inum:
                    out.append((data[pos + 8:pos + 8 + name_len].decode("utf-8", "surrogateescape"), inum, ftype))
                pos += rec_len
        return out

    def lookup(self, path: str) -> Inode:
        """Inode of a regular file.  Directories and symlinks are not resolvable."""
        parts = [p for p in path.split("/") if p]
        cur = self.inode(ROOT_INODE)
        walked = "/"
        for i, name in enumerate(parts):
            entries = {n: inum for n, inum, _ in self.list_dir(cur)}
            if name not in entries:
                raise NotFound(f"{posixpath.join(walked, name)}: no such file or directory")
            cur = self.inode(entries[name])
            walked = posixpath.join(walked, name)
            if cur.is_link:
                raise UnsupportedLink(f"{walked} is a symbolic link")
            if i < len(parts) - 1 and not cur.is_dir:
                raise NotFound(f"{walked} is not a directory")
        if not cur.is_reg:
            raise NotFound(f"{path}: not a regular file")
        return cur

    def resolve(self, path: str) -> ExtentMap:
        return self.extent_map(self.lookup(path))

    def read_file(self, path: str) -> bytes:
        return self.read_inode_data(self.lookup(path))

    def walk(self, top: str = "/"):
        """Yield (path, inode) for every regular file below ``top``, depth first."""
        seen = set()
        stack = [("/", self.inode(ROOT_INODE))]
        if top.strip("/"):
            cur = self.inode(ROOT_INODE)
            for name in top.strip("/").split("/"):
                entries = {n: inum for n, inum, _ in self.list_dir(cur)}
                if name not in entries:
                    raise NotFound(top)
                cur = self.inode(entries[name])
            stack = [("/" + top.strip("/"), cur)]
        while stack:
            path, ino = stack.pop()
            if ino.number in seen:
                continue
            seen.add(ino.number)
            for name, inum, _ in sorted(self.list_dir(ino), reverse=True):
                if name in (".", ".."):
                    continue
                child = self.inode(inum)
                cpath = posixpath.join(path, name)
                if child.is_dir:
                    stack.append((cpath, child))
                elif child.is_reg:
                    yield cpath, child


def resolve_path(view, partition: PartitionEntry, path: str) -> ExtentMap:
    return Ext2(view, partition).resolve(path)


def read_file(view, partition: PartitionEntry, path: str) -> bytes:
    return Ext2(view, partition).read_file(path)


def to_absolute_lbas(emap: ExtentMap, partition: PartitionEntry, device_block_size: int) -> list[LbaRange]:
    if emap.fs_block_size < device_block_size or emap.fs_block_size % device_block_size:
        raise AlignmentError(f"fs block {emap.fs_block_size} is not a multiple of device block {device_block_size}")
    ratio = emap.fs_block_size // device_block_size
    return [LbaRange(partition.start_lba + e.block * ratio, e.count * ratio) for e in emap.extents]
