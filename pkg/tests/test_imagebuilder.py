import hashlib
import json
import subprocess

import pytest

from envmesim.diskfs import Ext2, ImageView, UnsupportedLink, parse_partitions
from envmesim.host.trace import TraceOp
from envmesim.malice.bootpattern import BootPatternDetector
from envmesim.scenario.imagebuilder import (BuildError, FileSpec, ImageSpec, PartitionSpec, boot_trace,
                                            build_image)
from conftest import need_tool
from test_diskfs import debugfs_block_map

MiB = 1 << 20


def test_empty_partition_has_empty_root():
    img = build_image(ImageSpec(size_bytes=8 * MiB))
    view = ImageView(img.image)
    fs = Ext2(view, parse_partitions(view)[0])
    assert list(fs.walk()) == []
    names = {n for n, _, _ in fs.list_dir(fs.inode(2))}
    assert names == {".", "..", "lost+found"}


def test_file_larger_than_free_space():
    with pytest.raises(BuildError):
        build_image(ImageSpec(size_bytes=4 * MiB, partitions=[PartitionSpec(files=[FileSpec("/x", size=5 * MiB)])]))


def test_bad_specs():
    with pytest.raises(BuildError):
        build_image(ImageSpec(block_size=1000))
    with pytest.raises(BuildError):
        build_image(ImageSpec(scheme="apm"))
    with pytest.raises(BuildError):
        build_image(ImageSpec(block_size=4096, partitions=[PartitionSpec(fs_block_size=1024)]))
    with pytest.raises(BuildError):
        ImageSpec.from_dict({"size_mib": 8, "bogus": 1})
    with pytest.raises(BuildError):
        ImageSpec.from_dict({"files": [{"text": "no path"}]})


def test_deterministic_bytes():
    spec = ImageSpec(size_bytes=8 * MiB, seed=9, partitions=[PartitionSpec(
        fragment=True, files=[FileSpec("/a", size=300_000), FileSpec("/b/c", size=40_000)])])
    a, b = build_image(spec), build_image(spec)
    assert a.image == b.image and a.manifest == b.manifest


def test_manifest_records(boot_image):
    rec = boot_image.file("/sbin/init")
    assert rec["size"] == 8192 and rec["mode"] & 0o777 == 0o755
    assert sum(c for _, c, _ in rec["extents"]) == 8
    part = boot_image.manifest["partitions"][0]
    assert all(lba >= part["start_lba"] for lba, _ in rec["lba_ranges"])
    with pytest.raises(KeyError):
        boot_image.file("/nope")


def test_save_writes_manifest(tmp_path, boot_image):
    out = tmp_path / "img.raw"
    boot_image.save(str(out))
    assert out.stat().st_size == len(boot_image.image)
    assert json.loads((tmp_path / "img.raw.manifest.json").read_text()) == json.loads(
        json.dumps(boot_image.manifest))


def test_from_dict_shorthand(tmp_path):
    (tmp_path / "payload.bin").write_bytes(b"\x01\x02")
    spec = ImageSpec.from_dict({"size_mib": 8, "scheme": "mbr", "files": [
        {"path": "/etc/motd", "text": "hi"}, {"path": "/bin/x", "source": "payload.bin", "mode": "755"},
        {"path": "/h", "hex": "de ad"}, {"path": "/l", "symlink": "/etc/motd"}], "dirs": ["/var/empty"]},
        str(tmp_path))
    img = build_image(spec)
    view = ImageView(img.image)
    fs = Ext2(view, parse_partitions(view)[0])
    assert fs.read_file("/etc/motd") == b"hi"
    assert fs.read_file("/bin/x") == b"\x01\x02" and fs.lookup("/bin/x").mode & 0o777 == 0o755
    assert fs.read_file("/h") == b"\xde\xad"
    with pytest.raises(UnsupportedLink):
        fs.lookup("/l")
    var = dict((n, i) for n, i, _ in fs.list_dir(fs.inode(2)))["var"]
    assert "empty" in {n for n, _, _ in fs.list_dir(fs.inode(var))}
    with pytest.raises(BuildError):
        ImageSpec.from_dict({"files": [{"path": "/x", "source": "missing.bin"}]}, str(tmp_path))


def test_fragmented_manifest_matches_debugfs(tmp_path):
    debugfs = need_tool("debugfs")
    spec = ImageSpec(size_bytes=16 * MiB, seed=4, partitions=[PartitionSpec(fragment=True, files=[
        FileSpec("/f1", size=900_000), FileSpec("/f2", size=20_000), FileSpec("/f3", size=2 * MiB)])])
    img = build_image(spec)
    path = tmp_path / "d.raw"
    img.save(str(path))
    target = f"{path}?offset={img.manifest['partitions'][0]['start_lba'] * 512}"
    for f in ("/f1", "/f2", "/f3"):
        rec = img.file(f)
        assert len(rec["extents"]) > 1
        mine = {lg + k: blk + k for blk, cnt, lg in rec["extents"] for k in range(cnt)}
        assert mine == debugfs_block_map(debugfs, target, f)


def test_fill_modes():
    assert FileSpec("/z", size=10, fill="zero").materialize(0) == bytes(10)
    assert FileSpec("/p", size=5, fill="pattern").materialize(0) == b"/p\n/p"
    assert FileSpec("/r", size=64).materialize(1) != FileSpec("/r", size=64).materialize(2)
    with pytest.raises(BuildError):
        FileSpec("/q", size=1, fill="weird").materialize(0)


def test_boot_trace_satisfies_the_boot_detector(boot_image):
    ops = boot_trace(boot_image.manifest)
    assert ops[0] == TraceOp("read", 0, 1)
    part = boot_image.manifest["partitions"][0]
    view = ImageView(boot_image.image)
    fs = Ext2(view, parse_partitions(view)[0])
    det = BootPatternDetector.from_layout("b", part["start_lba"], 512, fs.inode_table_window(0))
    for op in ops:
        det.observe(op.lba, op.count)
    assert det.fired
    covered = {(op.lba, op.count) for op in ops}
    for lba, count in boot_image.file("/sbin/init")["lba_ranges"]:
        assert (lba, count) in covered
