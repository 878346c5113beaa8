"""Add IOMMU-disabling flags to every kernel command line in a GRUB config."""

from __future__ import annotations

import re
import struct

from ..diskfs.ext2 import Ext2, to_absolute_lbas
from ..host.bootcfg import GRUB_CFG_PATHS, KERNEL_LINE, find_cfg, kernel_cmdline  # noqa: F401
from .shadow import ShadowRule, SizeOverflow

IOMMU_OFF_TOKENS = ("amd_iommu=off", "intel_iommu=off")
_DEFAULT_LINE = re.compile(rb'^(\s*GRUB_CMDLINE_LINUX(?:_DEFAULT)?=")([^"]*)("\s*)$')


def _add_tokens(args: bytes, tokens) -> bytes:
    present = set(args.split())
    missing = [t.encode() for t in tokens if t.encode() not in present]
    if not missing:
        return args
    base = args.rstrip()
    return base + (b" " if base.strip() else b"") + b" ".join(missing)


def patch_cfg(data: bytes, tokens=IOMMU_OFF_TOKENS) -> bytes:
    """Patched copy of ``data``; idempotent, and other bytes are untouched."""
    out = []
    for line in data.splitlines(keepends=True):
        body = line.rstrip(b"\r\n")
        eol = line[len(body):]
        m = KERNEL_LINE.match(body)
        if m:
            args = _add_tokens(m.group(2), tokens)
            lead = b" " if args and not args.startswith((b" ", b"\t")) else b""
            body = m.group(1) + lead + args + m.group(3)
        else:
            m = _DEFAULT_LINE.match(body)
            if m:
                body = m.group(1) + _add_tokens(m.group(2), tokens) + m.group(3)
        out.append(body + eol)
    return b"".join(out)


def inode_location(fs: Ext2, number: int) -> tuple[int, int]:
    """(fs block, byte offset inside it) of an inode."""
    group, index = divmod(number - 1, fs.inodes_per_group)
    off = fs.inode_tables[group] * fs.block_size + index * fs.inode_size
    return off // fs.block_size, off % fs.block_size


def plan_patch(fs: Ext2, path: str, tokens=IOMMU_OFF_TOKENS):
    """Work out the block images a patch needs.

    Returns (original, patched, data_blocks, inode_block) where data_blocks
    is the list of (absolute LBA range, bytes) covering the file and
    inode_block is None or ((lba, count), bytes) when the size grows.
    """
    ino = fs.lookup(path)
    original = fs.read_inode_data(ino)
    patched = patch_cfg(original, tokens)
    emap = fs.extent_map(ino)
    if len(patched) > emap.allocated_bytes:
        raise SizeOverflow(f"{path}: patched file needs {len(patched)} bytes, "
                           f"only {emap.allocated_bytes} allocated")
    dev_bs = fs.view.block_size
    ranges = to_absolute_lbas(emap, fs.partition, dev_bs)
    image = patched.ljust(emap.allocated_bytes, b"\0")
    data_blocks = []
    pos = 0
    for r in ranges:
        n = r.count * dev_bs
        data_blocks.append(((r.lba, r.count), image[pos:pos + n]))
        pos += n
    inode_block = None
    if len(patched) != ino.size:
        blk, off = inode_location(fs, ino.number)
        raw = bytearray(fs.read_block(blk))
        struct.pack_into("<I", raw, off + 4, len(patched) & 0xFFFFFFFF)
        ratio = fs.block_size // dev_bs
        inode_block = ((fs.partition.start_lba + blk * ratio, ratio), bytes(raw))
    return original, patched, data_blocks, inode_block


def shadow_rules(plan, gate: str, name: str = "grub") -> list[ShadowRule]:
    _, _, data_blocks, inode_block = plan
    rules = [ShadowRule([rng for rng, _ in data_blocks], b"".join(b for _, b in data_blocks),
                        "boot-gated", gate, name)]
    if inode_block is not None:
        rules.append(ShadowRule([inode_block[0]], inode_block[1], "boot-gated", gate, name + "-inode"))
    return rules
