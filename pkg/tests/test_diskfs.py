import hashlib
import os
import random
import re
import struct
import subprocess
import zlib

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from envmesim.diskfs import (AlignmentError, CorruptFilesystem, CorruptTable, Ext2, ExtentMap, ImageView,
                             NoPartitionTable, NotFound, UnsupportedFilesystem, UnsupportedLink, parse_partitions,
                             read_bytes, read_file, resolve_path, to_absolute_lbas)
from envmesim.diskfs.ext2 import Extent, merge_runs
from envmesim.diskfs.partitions import LINUX_FS_GUID, PartitionEntry
from envmesim.scenario.imagebuilder import FileSpec, ImageSpec, PartitionSpec, build_image
from conftest import need_tool
from helpers import check_fs_oracle, random_image_spec

MiB = 1 << 20


def two_part_image(scheme="gpt"):
    parts = [PartitionSpec(size_bytes=4 * MiB, files=[FileSpec("/a.txt", b"first\n")], label="one"),
             PartitionSpec(files=[FileSpec("/b.txt", b"second\n")], label="two")]
    return build_image(ImageSpec(size_bytes=16 * MiB, scheme=scheme, seed=3, partitions=parts))


# partition tables

@pytest.mark.parametrize("scheme", ["gpt", "mbr"])
def test_two_partitions(scheme):
    img = two_part_image(scheme)
    parts = parse_partitions(ImageView(img.image))
    man = img.manifest["partitions"]
    assert [(p.start_lba, p.length_lbas) for p in parts] == [(m["start_lba"], m["length_lbas"]) for m in man]
    assert parts[0].start_lba == 2048  # 1 MiB aligned
    if scheme == "gpt":
        assert parts[0].type_tag == LINUX_FS_GUID and parts[0].name == "one"
    else:
        assert parts[0].type_tag == "0x83"
    for p, name in zip(parts, ("/a.txt", "/b.txt")):
        assert Ext2(ImageView(img.image), p).read_file(name).startswith((b"first", b"second"))


@pytest.mark.parametrize("scheme", ["gpt", "mbr"])
def test_partx_agrees(tmp_path, scheme):
    partx = need_tool("partx")
    img = two_part_image(scheme)
    path = tmp_path / "disk.raw"
    path.write_bytes(img.image)
    out = subprocess.run([partx, "--show", "--bytes", "--noheadings", "-o", "START,SECTORS", str(path)],
                         capture_output=True, text=True, check=True).stdout
    theirs = [tuple(int(x) for x in line.split()) for line in out.strip().splitlines()]
    ours = [(p.start_lba, p.length_lbas) for p in parse_partitions(ImageView(img.image))]
    assert theirs == ours


def _fix_gpt_crc(img: bytearray):
    hdr = bytearray(img[512:512 + 92])
    hdr[16:20] = bytes(4)
    struct.pack_into("<I", img, 512 + 16, zlib.crc32(hdr))


def test_gpt_crc_checks():
    img = bytearray(two_part_image().image)
    bad = bytearray(img)
    bad[512 + 24] ^= 1  # my_lba, covered by the header CRC
    with pytest.raises(CorruptTable, match="header CRC"):
        parse_partitions(ImageView(bad))
    bad = bytearray(img)
    bad[1024 + 40] ^= 1  # first entry start, covered by the entry array CRC
    with pytest.raises(CorruptTable, match="entry array CRC"):
        parse_partitions(ImageView(bad))


def test_gpt_rejects_overlap_and_oversize():
    img = bytearray(two_part_image().image)
    # make entry 1 start inside entry 0 and refresh both CRCs
    first0, last0 = struct.unpack_from("<QQ", img, 1024 + 32)
    struct.pack_into("<Q", img, 1024 + 128 + 32, last0 - 5)
    struct.pack_into("<I", img, 512 + 88, zlib.crc32(bytes(img[1024:1024 + 128 * 128])))
    _fix_gpt_crc(img)
    with pytest.raises(CorruptTable, match="overlap"):
        parse_partitions(ImageView(img))
    img = bytearray(two_part_image().image)
    struct.pack_into("<I", img, 512 + 80, 100_000)
    _fix_gpt_crc(img)
    with pytest.raises(CorruptTable):
        parse_partitions(ImageView(img))


def test_no_table_and_truncated_device():
    with pytest.raises(NoPartitionTable):
        parse_partitions(ImageView(bytes(1 * MiB)))
    img = two_part_image("mbr").image
    with pytest.raises(CorruptTable, match="past the device end"):
        parse_partitions(ImageView(bytes(img[:8 * MiB])))


def test_mbr_zero_start_is_corrupt():
    blk = bytearray(512)
    blk[510:512] = b"\x55\xaa"
    blk[446 + 4] = 0x83
    struct.pack_into("<II", blk, 446 + 8, 0, 100)
    with pytest.raises(CorruptTable):
        parse_partitions(ImageView(bytes(blk) + bytes(512 * 200)))


# ext2

@pytest.fixture(scope="module")
def mke2fs_image(tmp_path_factory):
    mke2fs = need_tool("mke2fs")
    root = tmp_path_factory.mktemp("tree")
    rng = random.Random(1)
    files = {"sbin/init": rng.randbytes(300_000), "etc/hostname": b"box\n", "empty": b"",
             "deep/a/b/c.txt": b"x" * 5000, "big.bin": rng.randbytes(3 * MiB)}
    for rel, data in files.items():
        p = root / "d" / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    os.symlink("etc/hostname", root / "d" / "link")
    img = root / "fs.img"
    with open(img, "wb") as fh:
        fh.truncate(16 * MiB)
    subprocess.run([mke2fs, "-q", "-F", "-t", "ext2", "-b", "1024", "-d", str(root / "d"), str(img)], check=True)
    return img, files


def _whole_disk(data):
    return PartitionEntry(0, 0, len(data) // 512, "raw", "raw")


def test_reads_mke2fs_image(mke2fs_image):
    img, files = mke2fs_image
    data = img.read_bytes()
    fs = Ext2(ImageView(data), _whole_disk(data))
    for rel, content in files.items():
        assert fs.read_file("/" + rel) == content
    assert sorted(p for p, _ in fs.walk()) == sorted("/" + k for k in files)
    with pytest.raises(UnsupportedLink):
        fs.lookup("/link")
    with pytest.raises(NotFound):
        fs.lookup("/nope")
    with pytest.raises(NotFound):
        fs.lookup("/etc/hostname/x")
    with pytest.raises(NotFound):
        fs.lookup("/deep")


def debugfs_block_map(debugfs, image, path) -> dict:
    """logical -> physical block, from the data ranges of ``debugfs stat`` (metadata blocks skipped)."""
    out = subprocess.run([debugfs, "-R", f"stat {path}", str(image)], capture_output=True, text=True,
                         check=True).stdout
    text = out.split("BLOCKS:", 1)[1].split("TOTAL", 1)[0]
    mapping = {}
    for m in re.finditer(r"\((\d+)(?:-(\d+))?\):(\d+)(?:-(\d+))?", text):
        l0, l1, p0 = int(m.group(1)), int(m.group(2) or m.group(1)), int(m.group(3))
        for k in range(l1 - l0 + 1):
            mapping[l0 + k] = p0 + k
    return mapping


def test_extents_match_debugfs(mke2fs_image):
    debugfs = need_tool("debugfs")
    img, files = mke2fs_image
    data = img.read_bytes()
    fs = Ext2(ImageView(data), _whole_disk(data))
    for rel in ("sbin/init", "big.bin", "deep/a/b/c.txt"):
        ours = {e.logical + k: e.block + k for e in fs.resolve("/" + rel).extents for k in range(e.count)}
        assert ours == debugfs_block_map(debugfs, img, "/" + rel)


def test_builder_image_passes_e2fsck_and_debugfs(tmp_path, boot_image):
    e2fsck = need_tool("e2fsck")
    debugfs = need_tool("debugfs")
    path = tmp_path / "disk.raw"
    boot_image.save(str(path))
    off = boot_image.manifest["partitions"][0]["start_lba"] * 512
    r = subprocess.run([e2fsck, "-fn", f"{path}?offset={off}"], capture_output=True, text=True)
    assert r.returncode == 0, r.stdout + r.stderr
    out = subprocess.run([debugfs, "-R", "cat /sbin/init", f"{path}?offset={off}"], capture_output=True,
                         check=True).stdout
    assert hashlib.sha256(out).hexdigest() == boot_image.file("/sbin/init")["sha256"]


def test_unsupported_and_corrupt_filesystems():
    img = bytearray(two_part_image().image)
    view = ImageView(img)
    p = parse_partitions(view)[0]
    sb = p.start_lba * 512 + 1024
    bad = bytearray(img)
    bad[sb + 56] = 0
    with pytest.raises(UnsupportedFilesystem):
        Ext2(ImageView(bad), p)
    bad = bytearray(img)
    struct.pack_into("<I", bad, sb + 96, 0x40)  # extents
    with pytest.raises(UnsupportedFilesystem):
        Ext2(ImageView(bad), p)
    bad = bytearray(img)
    struct.pack_into("<I", bad, sb + 4, 10**8)
    with pytest.raises(CorruptFilesystem):
        Ext2(ImageView(bad), p)


def test_to_absolute_lbas():
    emap = ExtentMap(3000, [Extent(100, 2, 0), Extent(300, 1, 2)], 1024, None)
    part = PartitionEntry(0, 2048, 10_000, "x", "gpt")
    assert [tuple(r) for r in to_absolute_lbas(emap, part, 512)] == [(2248, 4), (2648, 2)]
    with pytest.raises(AlignmentError):
        to_absolute_lbas(emap, part, 4096)


def test_merge_runs():
    assert merge_runs([(0, 10), (1, 11), (2, 12), (3, 20), (5, 21)]) == [
        Extent(10, 3, 0), Extent(20, 1, 3), Extent(21, 1, 5)]


def test_module_level_helpers(boot_image):
    view = ImageView(boot_image.image)
    p = parse_partitions(view)[0]
    assert resolve_path(view, p, "/sbin/init").file_size == 8192
    assert hashlib.sha256(read_file(view, p, "/sbin/init")).hexdigest() == boot_image.file("/sbin/init")["sha256"]
    assert read_bytes(view, 512, 8) == b"EFI PART"


def test_sparse_file_holes_are_zero(tmp_path):
    mke2fs = need_tool("mke2fs")
    root = tmp_path / "d"
    root.mkdir()
    with open(root / "sparse", "wb") as fh:
        fh.seek(200_000)
        fh.write(b"tail")
    img = tmp_path / "fs.img"
    with open(img, "wb") as fh:
        fh.truncate(4 * MiB)
    subprocess.run([mke2fs, "-q", "-F", "-t", "ext2", "-b", "1024", "-d", str(root), str(img)], check=True)
    data = img.read_bytes()
    fs = Ext2(ImageView(data), _whole_disk(data))
    content = fs.read_file("/sparse")
    assert content == bytes(200_000) + b"tail"
    assert fs.resolve("/sparse").allocated_bytes < 200_000


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2**32 - 1))
def test_builder_oracle_property(seed):
    spec = random_image_spec(random.Random(seed), triple=False)
    assert check_fs_oracle(spec, build_image(spec)) == []
