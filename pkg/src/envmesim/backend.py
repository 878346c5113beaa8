"""Block storage behind the controller, with snapshots and the DoS failure modes.

The store is a flat byte array (in memory or a memory-mapped raw image
file).  ``read_blocks``/``write_blocks`` apply the current mode; ``raw_read``
and ``raw_write`` always see the bytes as stored and are reserved for the
device firmware itself.
"""

from __future__ import annotations

import hashlib
import mmap
import os
from dataclasses import dataclass

import numpy as np

MODES = ("normal", "corrupt", "brick", "cipher")


class BackendError(Exception):
    pass


class DeviceDead(BackendError):
    """The store has been bricked; every access fails from now on."""


class RangeError(BackendError):
    pass


class CapacityMismatch(BackendError):
    pass


@dataclass(frozen=True)
class Snapshot:
    block_size: int
    block_count: int
    data: bytes


def corruption_mask(seed: int, lba: int, block_size: int) -> list[int]:
    """Bit positions flipped in block ``lba``: one per 64-byte chunk."""
    chunks = block_size // 64
    digest = hashlib.shake_256(b"corrupt" + seed.to_bytes(8, "little") + lba.to_bytes(8, "little")).digest(2 * chunks)
    out = []
    for j in range(chunks):
        pos = int.from_bytes(digest[2 * j:2 * j + 2], "little") % 512
        out.append(j * 512 + pos)
    return out


def _keystream(key: bytes, lba: int, n: int) -> np.ndarray:
    ks = hashlib.shake_256(key + lba.to_bytes(8, "little")).digest(n)
    return np.frombuffer(ks, dtype=np.uint8)


def cipher_blocks(key: bytes, lba: int, data: bytes, block_size: int, inverse: bool = False) -> bytes:
    """Keyed per-block byte-wise additive stream transform (not an involution)."""
    arr = np.frombuffer(data, dtype=np.uint8)
    out = np.empty_like(arr)
    for i in range(len(arr) // block_size):
        ks = _keystream(key, lba + i, block_size)
        blk = arr[i * block_size:(i + 1) * block_size]
        out[i * block_size:(i + 1) * block_size] = (blk - ks) if inverse else (blk + ks)
    return out.tobytes()


class BlockStore:
    def __init__(self, block_size: int = 512, block_count: int = 2048, *, path=None,
                 seed: int = 0, cipher_key: bytes | None = None, log=None):
        if block_size not in (512, 4096):
            raise ValueError("block size must be 512 or 4096")
        if block_count <= 0:
            raise ValueError("block count must be positive")
        self.block_size = block_size
        self.block_count = block_count
        self.seed = seed
        self.cipher_key = cipher_key or hashlib.sha256(b"cipher-key" + seed.to_bytes(8, "little")).digest()
        self.mode = "normal"
        self.log = log
        self.path = path
        capacity = block_size * block_count
        if path is None:
            self._buf = bytearray(capacity)
            self._fh = None
        else:
            exists = os.path.exists(path)
            self._fh = open(path, "r+b" if exists else "w+b")
            if os.fstat(self._fh.fileno()).st_size != capacity:
                if exists:
                    self._fh.close()
                    raise CapacityMismatch(f"{path}: size does not match {capacity} bytes")
                self._fh.truncate(capacity)
            self._buf = mmap.mmap(self._fh.fileno(), capacity)

    @classmethod
    def from_image(cls, image: bytes, block_size: int = 512, **kw) -> "BlockStore":
        if len(image) % block_size:
            raise ValueError("image size is not a multiple of the block size")
        store = cls(block_size, len(image) // block_size, **kw)
        store._buf[:] = image
        return store

    @property
    def capacity(self) -> int:
        return self.block_size * self.block_count

    def close(self) -> None:
        if self._fh is not None:
            self._buf.flush()
            self._buf.close()
            self._fh.close()
            self._fh = None

    def _span(self, lba: int, count: int) -> slice:
        if lba < 0 or count < 0 or lba + count > self.block_count:
            raise RangeError(f"blocks [{lba}, {lba + count}) outside [0, {self.block_count})")
        return slice(lba * self.block_size, (lba + count) * self.block_size)

    def _emit(self, kind, **detail):
        if self.log is not None:
            self.log.emit("backend", kind, **detail)

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if self.mode == "brick" and mode != "brick":
            raise DeviceDead("a bricked store cannot leave brick mode")
        if mode != self.mode:
            self._emit("mode-change", old=self.mode, new=mode)
        self.mode = mode

    def read_blocks(self, lba: int, count: int) -> bytes:
        if self.mode == "brick":
            raise DeviceDead("store is bricked")
        data = bytes(self._buf[self._span(lba, count)])
        if self.mode == "corrupt":
            buf = bytearray(data)
            for i in range(count):
                base = i * self.block_size * 8
                for bit in corruption_mask(self.seed, lba + i, self.block_size):
                    p = base + bit
                    buf[p >> 3] ^= 1 << (p & 7)
            data = bytes(buf)
        elif self.mode == "cipher":
            data = cipher_blocks(self.cipher_key, lba, data, self.block_size)
        return data

    def write_blocks(self, lba: int, count: int, data: bytes) -> None:
        if self.mode == "brick":
            raise DeviceDead("store is bricked")
        span = self._span(lba, count)
        if len(data) != count * self.block_size:
            raise ValueError("data length does not match block count")
        if self.mode == "cipher":
            data = cipher_blocks(self.cipher_key, lba, data, self.block_size)
        self._buf[span] = data

    def flush(self) -> None:
        if self.mode == "brick":
            raise DeviceDead("store is bricked")
        if isinstance(self._buf, mmap.mmap):
            self._buf.flush()

    # firmware-side access, unaffected by modes
    def raw_read(self, lba: int, count: int) -> bytes:
        return bytes(self._buf[self._span(lba, count)])

    def raw_write(self, lba: int, data: bytes) -> None:
        if len(data) % self.block_size:
            raise ValueError("raw writes must cover whole blocks")
        self._buf[self._span(lba, len(data) // self.block_size)] = data

    def snapshot(self) -> Snapshot:
        return Snapshot(self.block_size, self.block_count, bytes(self._buf))

    def restore(self, snap: Snapshot) -> None:
        if (snap.block_size, snap.block_count) != (self.block_size, self.block_count):
            raise CapacityMismatch(
                f"image is {snap.block_count}x{snap.block_size}, store is {self.block_count}x{self.block_size}")
        self._buf[:] = snap.data

    def image(self) -> bytes:
        return bytes(self._buf)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self._buf)
