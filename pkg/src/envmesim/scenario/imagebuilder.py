"""Fixture disk images: GPT or MBR, one or more ext2 partitions, planted files.

The builder keeps its own record of where every file block went.  That
record (the manifest) is independent of the diskfs reader and is what the
reader is checked against.
"""

from __future__ import annotations

import hashlib
import json
import posixpath
import struct
import uuid
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..diskfs.partitions import LINUX_FS_GUID

MiB = 1 << 20
FS_TIMESTAMP = 1_700_000_000
INODE_SIZE = 128
ROOT_INO = 2
LOST_FOUND_INO = 11
GPT_ENTRIES = 128
GPT_ENTRY_SIZE = 128
FT_REG, FT_DIR, FT_LNK = 1, 2, 7


class BuildError(Exception):
    pass


@dataclass
class FileSpec:
    path: str
    content: bytes | None = None
    size: int | None = None
    fill: str = "random"  # random | zero | pattern
    mode: int = 0o644
    symlink: str | None = None

    def materialize(self, seed: int) -> bytes:
        if self.symlink is not None:
            return self.symlink.encode()
        if self.content is not None:
            return self.content
        n = self.size or 0
        if self.fill == "zero":
            return bytes(n)
        if self.fill == "pattern":
            unit = self.path.encode() + b"\n"
            return (unit * (n // len(unit) + 1))[:n]
        if self.fill != "random":
            raise BuildError(f"{self.path}: unknown fill {self.fill!r}")
        tweak = int.from_bytes(hashlib.sha256(self.path.encode()).digest()[:8], "little")
        return np.random.default_rng([seed, tweak]).bytes(n)


@dataclass
class PartitionSpec:
    start_lba: int | None = None
    size_lbas: int | None = None
    size_bytes: int | None = None
    fs: str = "ext2"  # ext2 | none
    fs_block_size: int = 1024
    fragment: bool = False
    bytes_per_inode: int = 16384
    label: str = ""
    files: list[FileSpec] = field(default_factory=list)
    dirs: list[str] = field(default_factory=list)


@dataclass
class ImageSpec:
    size_bytes: int = 64 * MiB
    block_size: int = 512
    scheme: str = "gpt"  # gpt | mbr
    seed: int = 0
    partitions: list[PartitionSpec] = field(default_factory=lambda: [PartitionSpec()])

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | None = None) -> "ImageSpec":
        """Build from the ``[image]`` table of a scenario or image-spec file."""
        d = dict(d)
        known = {"size_mib", "size_bytes", "block_size", "scheme", "seed", "partitions", "files", "dirs",
                 "fs_block_size", "fragment", "partition_start", "label"}
        unknown = set(d) - known
        if unknown:
            raise BuildError(f"unknown image keys: {', '.join(sorted(unknown))}")
        size = d.get("size_bytes", int(d.get("size_mib", 64) * MiB))
        parts = d.get("partitions")
        if parts is None:
            parts = [{"files": d.get("files", []), "dirs": d.get("dirs", []),
                      "fs_block_size": d.get("fs_block_size", 1024), "fragment": d.get("fragment", False),
                      "start_lba": d.get("partition_start"), "label": d.get("label", "")}]
        return cls(size, d.get("block_size", 512), d.get("scheme", "gpt"), d.get("seed", 0),
                   [_partition_from_dict(p, base_dir) for p in parts])


def _file_from_dict(f: dict, base_dir: str | None) -> FileSpec:
    f = dict(f)
    if "path" not in f:
        raise BuildError("file entry without a path")
    content = None
    if "text" in f:
        content = f["text"].encode()
    elif "hex" in f:
        content = bytes.fromhex("".join(f["hex"].split()))
    elif "source" in f:
        src = f["source"] if base_dir is None else posixpath.join(base_dir, f["source"])
        try:
            with open(src, "rb") as fh:
                content = fh.read()
        except OSError as exc:
            raise BuildError(f"{f['path']}: cannot read source {src}: {exc}") from None
    mode = f.get("mode", 0o644)
    if isinstance(mode, str):
        mode = int(mode, 8)
    return FileSpec(f["path"], content, f.get("size"), f.get("fill", "random"), mode, f.get("symlink"))


def _partition_from_dict(p: dict, base_dir: str | None) -> PartitionSpec:
    p = dict(p)
    files = [_file_from_dict(f, base_dir) for f in p.pop("files", [])]
    if "size_mib" in p:
        p["size_bytes"] = int(p.pop("size_mib") * MiB)
    try:
        return PartitionSpec(files=files, **p)
    except TypeError as exc:
        raise BuildError(f"bad partition entry: {exc}") from None


@dataclass
class BuiltImage:
    image: bytearray
    manifest: dict

    @property
    def block_size(self) -> int:
        return self.manifest["block_size"]

    def file(self, path: str, partition: int = 0) -> dict:
        for f in self.manifest["partitions"][partition]["files"]:
            if f["path"] == path:
                return f
        raise KeyError(path)

    def save(self, path: str, manifest_path: str | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.image)
        with open(manifest_path or path + ".manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)


def _guid(seed: int, tag: str) -> uuid.UUID:
    return uuid.UUID(bytes=hashlib.sha256(f"{seed}:{tag}".encode()).digest()[:16], version=4)


# ---------------------------------------------------------------- ext2 ----

class _Node:
    def __init__(self, path: str, kind: str, spec: FileSpec | None = None):
        self.path = path
        self.kind = kind  # dir | file | link
        self.spec = spec
        self.children: dict[str, _Node] = {}
        self.ino = 0
        self.data = b""
        self.i_block = [0] * 15
        self.nblocks = 0  # data + indirect
        self.pairs: list[tuple[int, int]] = []


def _has_super(g: int) -> bool:
    if g in (0, 1):
        return True
    for base in (3, 5, 7):
        n = base
        while n < g:
            n *= base
        if n == g:
            return True
    return False


class Ext2Writer:
    def __init__(self, bs: int, total_blocks: int, seed: int = 0, fragment: bool = False,
                 bytes_per_inode: int = 16384, label: str = ""):
        if bs not in (1024, 2048, 4096):
            raise BuildError(f"fs block size {bs} not supported")
        self.bs = bs
        self.seed = seed
        self.fragment = fragment
        self.bytes_per_inode = bytes_per_inode
        self.label = label
        self.fdb = 1 if bs == 1024 else 0
        self.bpg = 8 * bs
        self.blocks_count = min(total_blocks, 0xFFFFFFFF)
        self.root = _Node("/", "dir")

    def add(self, spec: FileSpec, seed: int) -> None:
        path = posixpath.normpath("/" + spec.path.lstrip("/"))
        if path == "/":
            raise BuildError("cannot plant a file at /")
        parts = path.strip("/").split("/")
        cur = self.root
        for i, name in enumerate(parts[:-1]):
            nxt = cur.children.get(name)
            if nxt is None:
                nxt = cur.children[name] = _Node("/" + "/".join(parts[:i + 1]), "dir")
            elif nxt.kind != "dir":
                raise BuildError(f"{nxt.path} is a file, cannot hold {path}")
            cur = nxt
        if parts[-1] in cur.children:
            raise BuildError(f"{path} planted twice")
        node = _Node(path, "link" if spec.symlink is not None else "file", spec)
        node.data = spec.materialize(seed)
        cur.children[parts[-1]] = node

    def add_dir(self, path: str) -> None:
        cur = self.root
        parts = [p for p in posixpath.normpath("/" + path.lstrip("/")).split("/") if p]
        for i, name in enumerate(parts):
            nxt = cur.children.get(name)
            if nxt is None:
                nxt = cur.children[name] = _Node("/" + "/".join(parts[:i + 1]), "dir")
            elif nxt.kind != "dir":
                raise BuildError(f"{nxt.path} is not a directory")
            cur = nxt

    def _nodes(self):
        out = []
        stack = [self.root]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(n.children[k] for k in sorted(n.children, reverse=True))
        return out

    # geometry
    def _geometry(self, inodes_needed: int) -> None:
        bs, bpg, fdb = self.bs, self.bpg, self.fdb
        ipb = bs // INODE_SIZE
        while True:
            groups = -(-(self.blocks_count - fdb) // bpg)
            if groups < 1:
                raise BuildError("partition too small for ext2")
            ipg = -(-(self.blocks_count * bs // self.bytes_per_inode) // groups)
            ipg = max(ipg, -(-inodes_needed // groups), 16)
            ipg = -(-ipg // ipb) * ipb
            if ipg > 8 * bs:
                raise BuildError("too many inodes for this filesystem size")
            gdt_blocks = -(-groups * 32 // bs)
            itb = ipg // ipb
            last = self.blocks_count - fdb - (groups - 1) * bpg
            overhead = (1 + gdt_blocks if _has_super(groups - 1) else 0) + 2 + itb
            if groups > 1 and last < overhead + 50:
                self.blocks_count -= last
                continue
            if last <= overhead:
                raise BuildError("partition too small for ext2")
            break
        self.groups, self.ipg, self.itb, self.gdt_blocks = groups, ipg, itb, gdt_blocks
        self.layout = []
        for g in range(groups):
            start = fdb + g * bpg
            meta = 1 + gdt_blocks if _has_super(g) else 0
            bb = start + meta
            self.layout.append({"start": start, "end": min(start + bpg, self.blocks_count), "super": _has_super(g),
                                "block_bitmap": bb, "inode_bitmap": bb + 1, "inode_table": bb + 2,
                                "data_start": bb + 2 + itb})

    def _free_list(self) -> np.ndarray:
        runs = [np.arange(g["data_start"], g["end"], dtype=np.int64) for g in self.layout]
        free = np.concatenate(runs) if runs else np.zeros(0, dtype=np.int64)
        if self.fragment and len(free):
            rng = np.random.default_rng([self.seed, 0xF4A9])
            cuts = np.cumsum(rng.integers(1, 97, size=len(free) // 8 + 2))
            cuts = cuts[cuts < len(free)]
            pieces = np.split(free, cuts)
            order = rng.permutation(len(pieces))
            free = np.concatenate([pieces[i] for i in order])
        return free

    # allocation
    def _alloc(self, node: _Node, nblocks: int) -> None:
        ppb = self.bs // 4
        remaining = [nblocks]
        logical = [0]

        def take() -> int:
            if self._next >= len(self._free):
                raise BuildError(f"{node.path}: file does not fit in the filesystem")
            b = int(self._free[self._next])
            self._next += 1
            node.nblocks += 1
            return b

        def data_block() -> int:
            b = take()
            node.pairs.append((logical[0], b))
            logical[0] += 1
            remaining[0] -= 1
            return b

        def indirect(depth: int) -> int:
            b = take()
            ptrs = []
            while remaining[0] and len(ptrs) < ppb:
                ptrs.append(data_block() if depth == 1 else indirect(depth - 1))
            self._meta[b] = ptrs
            return b

        for i in range(12):
            if not remaining[0]:
                return
            node.i_block[i] = data_block()
        for depth in (1, 2, 3):
            if not remaining[0]:
                return
            node.i_block[11 + depth] = indirect(depth)
        if remaining[0]:
            raise BuildError(f"{node.path}: file exceeds the triple-indirect limit")

    def _dir_data(self, node: _Node, parent: _Node) -> bytes:
        entries = [(node.ino, ".", FT_DIR), (parent.ino, "..", FT_DIR)]
        for name in sorted(node.children):
            c = node.children[name]
            entries.append((c.ino, name, {"dir": FT_DIR, "file": FT_REG, "link": FT_LNK}[c.kind]))
        blocks = []
        cur: list[tuple[int, bytes, int]] = []
        used = 0
        for ino, name, ft in entries:
            raw = name.encode()
            if len(raw) > 255:
                raise BuildError(f"name too long: {name}")
            need = 8 + (len(raw) + 3) // 4 * 4
            if used + need > self.bs:
                blocks.append(cur)
                cur, used = [], 0
            cur.append((ino, raw, ft))
            used += need
        blocks.append(cur)
        out = bytearray()
        for blk in blocks:
            b = bytearray(self.bs)
            pos = 0
            for i, (ino, raw, ft) in enumerate(blk):
                rec = 8 + (len(raw) + 3) // 4 * 4
                if i == len(blk) - 1:
                    rec = self.bs - pos
                struct.pack_into("<IHBB", b, pos, ino, rec, len(raw), ft)
                b[pos + 8:pos + 8 + len(raw)] = raw
                pos += rec
            out += b
        return bytes(out)

    def build(self, buf: memoryview) -> dict:
        """Write the filesystem into ``buf`` (zeroed partition bytes); return placement records."""
        bs = self.bs
        if "lost+found" not in self.root.children:
            self.root.children["lost+found"] = _Node("/lost+found", "dir")
        nodes = self._nodes()
        self._geometry(LOST_FOUND_INO + len(nodes))
        # inode numbers: root 2, lost+found 11, the rest in path order
        self.root.ino = ROOT_INO
        lf = self.root.children["lost+found"]
        lf.ino = LOST_FOUND_INO
        nxt = LOST_FOUND_INO + 1
        parents = {self.root.path: self.root}
        for n in nodes:
            for c in n.children.values():
                parents[c.path] = n
            if n.ino == 0:
                n.ino = nxt
                nxt += 1
        self.inodes_count = self.ipg * self.groups
        self._free = self._free_list()
        self._next = 0
        self._meta: dict[int, list[int]] = {}
        large = False
        for n in nodes:
            if n.kind == "dir":
                n.data = self._dir_data(n, parents[n.path])
            if n.kind == "link" and len(n.data) < 60:
                continue
            large |= len(n.data) >= 1 << 31
            self._alloc(n, -(-len(n.data) // bs))
        used = np.zeros(self.blocks_count, dtype=bool)
        used[:self.fdb] = True
        for g in self.layout:
            used[g["start"]:g["data_start"]] = True
        # file and directory contents, written run by run
        for n in nodes:
            for logical, phys, count in _runs(n.pairs):
                chunk = n.data[logical * bs:(logical + count) * bs]
                buf[phys * bs:phys * bs + len(chunk)] = chunk
                used[phys:phys + count] = True
        for b, ptrs in self._meta.items():
            buf[b * bs:b * bs + 4 * len(ptrs)] = np.asarray(ptrs, dtype="<u4").tobytes()
            used[b] = True
        # inode table
        dirs_per_group = [0] * self.groups
        inode_used = np.zeros(self.inodes_count + 1, dtype=bool)
        inode_used[1:LOST_FOUND_INO] = True
        for n in nodes:
            g, idx = divmod(n.ino - 1, self.ipg)
            inode_used[n.ino] = True
            if n.kind == "dir":
                dirs_per_group[g] += 1
            off = self.layout[g]["inode_table"] * bs + idx * INODE_SIZE
            buf[off:off + INODE_SIZE] = self._inode(n)
        # bitmaps and descriptors
        gdt = bytearray(self.gdt_blocks * bs)
        free_blocks_total = free_inodes_total = 0
        for gi, g in enumerate(self.layout):
            bm = np.ones(8 * bs, dtype=bool)
            span = used[g["start"]:g["end"]]
            bm[:len(span)] = span
            buf[g["block_bitmap"] * bs:(g["block_bitmap"] + 1) * bs] = np.packbits(bm, bitorder="little").tobytes()
            im = np.ones(8 * bs, dtype=bool)
            im[:self.ipg] = inode_used[1 + gi * self.ipg:1 + (gi + 1) * self.ipg]
            buf[g["inode_bitmap"] * bs:(g["inode_bitmap"] + 1) * bs] = np.packbits(im, bitorder="little").tobytes()
            free_b = int(len(span) - span.sum())
            free_i = int(self.ipg - im[:self.ipg].sum())
            free_blocks_total += free_b
            free_inodes_total += free_i
            struct.pack_into("<IIIHHH", gdt, 32 * gi, g["block_bitmap"], g["inode_bitmap"], g["inode_table"],
                             free_b, free_i, dirs_per_group[gi])
        for gi, g in enumerate(self.layout):
            if not g["super"]:
                continue
            sb = self._superblock(free_blocks_total, free_inodes_total, gi, large)
            sb_off = 1024 if gi == 0 else g["start"] * bs
            buf[sb_off:sb_off + 1024] = sb
            gdt_off = (g["start"] + 1) * bs
            buf[gdt_off:gdt_off + len(gdt)] = gdt
        return self._records(nodes)

    def _inode(self, n: _Node) -> bytes:
        bs = self.bs
        raw = bytearray(INODE_SIZE)
        if n.kind == "dir":
            mode = 0o040755 if n.spec is None else 0o040000 | (n.spec.mode & 0o7777)
            links = 2 + sum(1 for c in n.children.values() if c.kind == "dir")
        elif n.kind == "link":
            mode, links = 0o120777, 1
        else:
            mode, links = 0o100000 | (n.spec.mode & 0o7777), 1
        size = len(n.data)
        struct.pack_into("<HHIIIIIHHII", raw, 0, mode, 0, size & 0xFFFFFFFF, FS_TIMESTAMP, FS_TIMESTAMP,
                         FS_TIMESTAMP, 0, 0, links, n.nblocks * (bs // 512), 0)
        if n.kind == "link" and size < 60:
            raw[40:40 + size] = n.data
        else:
            struct.pack_into("<15I", raw, 40, *n.i_block)
        if n.kind == "file":
            struct.pack_into("<I", raw, 108, size >> 32)
        return bytes(raw)

    def _superblock(self, free_blocks: int, free_inodes: int, group: int, large: bool) -> bytes:
        sb = bytearray(1024)
        log_bs = (self.bs >> 10).bit_length() - 1
        struct.pack_into("<13I", sb, 0, self.inodes_count, self.blocks_count, 0, free_blocks, free_inodes,
                         self.fdb, log_bs, log_bs, self.bpg, self.bpg, self.ipg, 0, FS_TIMESTAMP)
        struct.pack_into("<HhHHHHIIII", sb, 52, 0, -1, 0xEF53, 1, 1, 0, FS_TIMESTAMP, 0, 0, 1)
        ro_compat = 0x1 | (0x2 if large else 0)
        struct.pack_into("<HHIHHIII", sb, 80, 0, 0, LOST_FOUND_INO, INODE_SIZE, group, 0, 0x2, ro_compat)
        sb[104:120] = _guid(self.seed, "fs-uuid").bytes
        label = self.label.encode()[:16]
        sb[120:120 + len(label)] = label
        return bytes(sb)

    def _records(self, nodes) -> list[dict]:
        out = []
        for n in nodes:
            if n.kind != "file":
                continue
            extents = [[phys, count, logical] for logical, phys, count in _runs(n.pairs)]
            out.append({"path": n.path, "inode": n.ino, "size": len(n.data), "mode": n.spec.mode,
                        "sha256": hashlib.sha256(n.data).hexdigest(), "extents": extents,
                        "fs_block_size": self.bs})
        return out


def _runs(pairs):
    """(logical, physical, count) runs contiguous in both coordinates."""
    out = []
    for logical, phys in pairs:
        if out and out[-1][0] + out[-1][2] == logical and out[-1][1] + out[-1][2] == phys:
            out[-1][2] += 1
        else:
            out.append([logical, phys, 1])
    return [tuple(r) for r in out]


# ------------------------------------------------------ partition tables ----

def _gpt(image: bytearray, bs: int, total: int, parts: list[tuple[int, int, PartitionSpec]], seed: int) -> None:
    entry_blocks = -(-GPT_ENTRIES * GPT_ENTRY_SIZE // bs)
    entries = bytearray(GPT_ENTRIES * GPT_ENTRY_SIZE)
    for i, (start, length, spec) in enumerate(parts):
        name = (spec.label or f"part{i + 1}").encode("utf-16-le")[:72]
        struct.pack_into("<16s16sQQQ", entries, i * GPT_ENTRY_SIZE, uuid.UUID(LINUX_FS_GUID).bytes_le,
                         _guid(seed, f"part{i}").bytes_le, start, start + length - 1, 0)
        entries[i * GPT_ENTRY_SIZE + 56:i * GPT_ENTRY_SIZE + 56 + len(name)] = name
    ecrc = zlib.crc32(entries)
    disk_guid = _guid(seed, "disk").bytes_le
    first_usable, last_usable = 2 + entry_blocks, total - 2 - entry_blocks

    def header(my_lba: int, alt_lba: int, entries_lba: int) -> bytes:
        h = bytearray(92)
        struct.pack_into("<8sIIIIQQQQ16sQIII", h, 0, b"EFI PART", 0x00010000, 92, 0, 0, my_lba, alt_lba,
                         first_usable, last_usable, disk_guid, entries_lba, GPT_ENTRIES, GPT_ENTRY_SIZE, ecrc)
        struct.pack_into("<I", h, 16, zlib.crc32(h))
        return bytes(h)

    mbr = bytearray(512)
    struct.pack_into("<B3sB3sII", mbr, 446, 0, b"\x00\x02\x00", 0xEE, b"\xff\xff\xff", 1, min(total - 1, 0xFFFFFFFF))
    mbr[510:512] = b"\x55\xaa"
    image[0:512] = mbr
    image[bs:bs + 92] = header(1, total - 1, 2)
    image[2 * bs:2 * bs + len(entries)] = entries
    backup_entries = total - 1 - entry_blocks
    image[backup_entries * bs:backup_entries * bs + len(entries)] = entries
    image[(total - 1) * bs:(total - 1) * bs + 92] = header(total - 1, 1, backup_entries)


def _mbr(image: bytearray, parts) -> None:
    if len(parts) > 4:
        raise BuildError("MBR supports at most 4 primary partitions")
    for i, (start, length, _) in enumerate(parts):
        if start + length > 0xFFFFFFFF:
            raise BuildError("partition beyond the 2 TiB MBR limit")
        struct.pack_into("<B3sB3sII", image, 446 + 16 * i, 0, b"\xfe\xff\xff", 0x83, b"\xfe\xff\xff", start, length)
    image[510:512] = b"\x55\xaa"


def _place(spec: ImageSpec, total: int) -> list[tuple[int, int, PartitionSpec]]:
    bs = spec.block_size
    entry_blocks = -(-GPT_ENTRIES * GPT_ENTRY_SIZE // bs)
    first_usable = 2 + entry_blocks if spec.scheme == "gpt" else 1
    last_usable = total - 2 - entry_blocks if spec.scheme == "gpt" else total - 1
    align = MiB // bs
    placed = []
    cursor = align
    for i, p in enumerate(spec.partitions):
        start = p.start_lba if p.start_lba is not None else -(-cursor // align) * align
        if start < first_usable:
            raise BuildError(f"partition {i} starts inside the partition table")
        if p.size_bytes:
            length = p.size_bytes // bs
        elif p.size_lbas:
            length = p.size_lbas
        else:
            length = last_usable + 1 - start
            if i < len(spec.partitions) - 1:
                raise BuildError("only the last partition may take the rest of the disk")
        fs_ratio = max(1, p.fs_block_size // bs)
        length -= length % fs_ratio
        if length <= 0 or start + length - 1 > last_usable:
            raise BuildError(f"partition {i} does not fit on a {spec.size_bytes}-byte disk")
        if placed and start < placed[-1][0] + placed[-1][1]:
            raise BuildError(f"partition {i} overlaps its predecessor")
        placed.append((start, length, p))
        cursor = start + length
    return placed


def build_image(spec: ImageSpec) -> BuiltImage:
    bs = spec.block_size
    if bs not in (512, 4096):
        raise BuildError("device block size must be 512 or 4096")
    if spec.size_bytes % bs or spec.size_bytes < 2 * MiB:
        raise BuildError("image size must be a block multiple of at least 2 MiB")
    if spec.scheme not in ("gpt", "mbr"):
        raise BuildError(f"unknown partition scheme {spec.scheme!r}")
    total = spec.size_bytes // bs
    placed = _place(spec, total)
    image = bytearray(spec.size_bytes)
    view = memoryview(image)
    if spec.scheme == "gpt":
        _gpt(image, bs, total, placed, spec.seed)
    else:
        _mbr(image, placed)
    manifest = {"block_size": bs, "size_bytes": spec.size_bytes, "scheme": spec.scheme, "seed": spec.seed,
                "partitions": []}
    for i, (start, length, p) in enumerate(placed):
        entry = {"index": i, "start_lba": start, "length_lbas": length, "fs": p.fs, "files": []}
        if p.fs == "ext2":
            if p.fs_block_size % bs and bs % p.fs_block_size:
                raise BuildError("fs block size and device block size are incompatible")
            if p.fs_block_size < bs:
                raise BuildError("fs block size smaller than the device block size")
            writer = Ext2Writer(p.fs_block_size, length * bs // p.fs_block_size, seed=spec.seed * 7919 + i,
                                fragment=p.fragment, bytes_per_inode=p.bytes_per_inode, label=p.label)
            for f in p.files:
                writer.add(f, spec.seed)
            for d in p.dirs:
                writer.add_dir(d)
            records = writer.build(view[start * bs:(start + length) * bs])
            ratio = p.fs_block_size // bs
            for r in records:
                r["lba_ranges"] = [[start + blk * ratio, cnt * ratio] for blk, cnt, _ in r["extents"]]
            entry.update(fs_block_size=p.fs_block_size, blocks_count=writer.blocks_count, files=records,
                         inode_table_block=writer.layout[0]["inode_table"], inode_table_blocks=writer.itb)
        elif p.fs != "none":
            raise BuildError(f"unknown filesystem {p.fs!r}")
        manifest["partitions"].append(entry)
    return BuiltImage(image, manifest)


def boot_trace(manifest: dict, paths=("/boot/grub/grub.cfg", "/sbin/init"), partition: int = 0) -> list:
    """Reads a firmware+kernel would issue: label, partition start, superblock, inode table, then files."""
    from ..host.trace import TraceOp

    bs = manifest["block_size"]
    part = manifest["partitions"][partition]
    start = part["start_lba"]
    fbs = part["fs_block_size"]
    ratio = fbs // bs
    ops = [TraceOp("read", 0, 1), TraceOp("read", start, max(1, 1024 // bs)),
           TraceOp("read", start + 1024 // bs, max(1, 1024 // bs)),
           TraceOp("read", start + part["inode_table_block"] * ratio, min(part["inode_table_blocks"], 8) * ratio)]
    for f in part["files"]:
        if f["path"] in paths:
            ops += [TraceOp("read", lba, count) for lba, count in f["lba_ranges"]]
    return ops
