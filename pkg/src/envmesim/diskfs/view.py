"""Read-only block views that the parsers run over."""

from __future__ import annotations

from .errors import DiskfsError


class ImageView:
    """A raw disk image held in memory (bytes, bytearray, mmap or memoryview)."""

    def __init__(self, data, block_size: int = 512):
        self.data = memoryview(data)
        self.block_size = block_size
        self.block_count = len(self.data) // block_size

    def read(self, lba: int, count: int) -> bytes:
        if lba < 0 or count < 0 or lba + count > self.block_count:
            raise DiskfsError(f"read [{lba}, {lba + count}) beyond device end {self.block_count}")
        bs = self.block_size
        return bytes(self.data[lba * bs:(lba + count) * bs])


class StoreView:
    """Firmware-side view of a BlockStore: stored bytes, no mode effects."""

    def __init__(self, store):
        self.store = store
        self.block_size = store.block_size
        self.block_count = store.block_count

    def read(self, lba: int, count: int) -> bytes:
        try:
            return self.store.raw_read(lba, count)
        except Exception as exc:
            raise DiskfsError(str(exc)) from exc


def read_bytes(view, offset: int, length: int) -> bytes:
    """Byte-granular read over a block view."""
    if length <= 0:
        return b""
    bs = view.block_size
    first = offset // bs
    last = (offset + length + bs - 1) // bs
    raw = view.read(first, last - first)
    skip = offset - first * bs
    return raw[skip:skip + length]
