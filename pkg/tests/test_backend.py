import os

import pytest
from hypothesis import given, settings, strategies as st

from envmesim.backend import (BlockStore, CapacityMismatch, DeviceDead, RangeError, cipher_blocks,
                              corruption_mask)
from envmesim.events import EventLog


def test_roundtrip_and_ranges():
    s = BlockStore(512, 16)
    s.write_blocks(3, 2, b"\x11" * 1024)
    assert s.read_blocks(3, 2) == b"\x11" * 1024
    with pytest.raises(RangeError):
        s.read_blocks(15, 2)
    with pytest.raises(ValueError):
        s.write_blocks(0, 1, b"short")
    with pytest.raises(ValueError):
        BlockStore(1000, 4)


def test_snapshot_restore():
    s = BlockStore(512, 8)
    snap = s.snapshot()
    s.write_blocks(0, 1, b"\xFF" * 512)
    s.restore(snap)
    assert s.image() == bytes(4096)
    with pytest.raises(CapacityMismatch):
        s.restore(BlockStore(512, 4).snapshot())


def test_brick_is_permanent():
    log = EventLog()
    s = BlockStore(512, 8, log=log)
    s.set_mode("brick")
    for op in (lambda: s.read_blocks(0, 1), lambda: s.write_blocks(0, 1, bytes(512)), s.flush):
        with pytest.raises(DeviceDead):
            op()
    with pytest.raises(DeviceDead):
        s.set_mode("normal")
    assert log.first("mode-change").detail == {"old": "normal", "new": "brick"}


def test_corrupt_mode_is_deterministic_and_read_only():
    s = BlockStore(512, 8, seed=3)
    data = os.urandom(4096)
    s.write_blocks(0, 8, data)
    s.set_mode("corrupt")
    a, b = s.read_blocks(0, 8), s.read_blocks(0, 8)
    assert a == b != data
    diff = sum(bin(x ^ y).count("1") for x, y in zip(a, data))
    assert diff == 8 * (512 // 64)
    assert s.raw_read(0, 8) == data


def test_corruption_mask_one_bit_per_chunk():
    bits = corruption_mask(9, 42, 4096)
    assert len(bits) == 64
    assert [b // 512 for b in bits] == list(range(64))


@settings(max_examples=30)
@given(st.binary(min_size=512, max_size=512 * 4).filter(lambda b: len(b) % 512 == 0), st.integers(0, 10**6))
def test_cipher_inverse(data, lba):
    key = b"k" * 32
    enc = cipher_blocks(key, lba, data, 512)
    assert cipher_blocks(key, lba, enc, 512, inverse=True) == data


def test_cipher_mode_reads_differ_and_writes_are_transformed():
    s = BlockStore(512, 4)
    plain = b"A" * 2048
    s.write_blocks(0, 4, plain)
    s.set_mode("cipher")
    assert s.read_blocks(0, 4) != plain
    assert s.read_blocks(0, 4) == s.read_blocks(0, 4)
    s.write_blocks(0, 1, b"B" * 512)
    assert s.raw_read(0, 1) != b"B" * 512


def test_file_backed_store(tmp_path):
    p = tmp_path / "disk.raw"
    s = BlockStore(512, 8, path=str(p))
    s.write_blocks(1, 1, b"\x42" * 512)
    s.close()
    assert p.stat().st_size == 4096
    s2 = BlockStore(512, 8, path=str(p))
    assert s2.read_blocks(1, 1) == b"\x42" * 512
    s2.close()
    with pytest.raises(CapacityMismatch):
        BlockStore(512, 16, path=str(p))


def test_from_image_and_save(tmp_path):
    img = bytes(range(256)) * 8
    s = BlockStore.from_image(img, 512)
    assert s.block_count == 4
    s.save(tmp_path / "x.raw")
    assert (tmp_path / "x.raw").read_bytes() == img
    with pytest.raises(ValueError):
        BlockStore.from_image(b"123", 512)
