"""Boot read-pattern detection: an ordered subsequence of LBA window predicates."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class LbaWindow:
    start: int
    end: int  # exclusive
    label: str = ""

    def hit(self, lba: int, count: int) -> bool:
        return lba < self.end and self.start < lba + count


class BootPatternDetector:
    """Fires once every window has been read, in order; stays fired until reset."""

    def __init__(self, name: str, windows, log=None):
        if not windows:
            raise ValueError("boot pattern needs at least one window")
        self.name = name
        self.windows = list(windows)
        self.log = log
        self.progress = 0
        self.fired = False
        self.epoch = 0  # incremented on every firing

    def observe(self, lba: int, count: int) -> bool:
        """Feed one read; True when this read completes the pattern."""
        if self.fired:
            return False
        # one read may satisfy several consecutive windows
        fired_now = False
        while self.progress < len(self.windows) and self.windows[self.progress].hit(lba, count):
            self.progress += 1
            if self.progress == len(self.windows):
                self.fired = True
                self.epoch += 1
                fired_now = True
                if self.log is not None:
                    self.log.emit("malice", "boot-pattern-fired", detector=self.name, lba=lba, count=count,
                                  epoch=self.epoch)
                break
        return fired_now

    def reset(self) -> None:
        self.progress = 0
        self.fired = False

    @classmethod
    def from_layout(cls, name: str, partition_start: int, device_block_size: int, inode_table, log=None):
        """Windows for LBA 0, partition start, superblock and the group 0 inode table."""
        bs = device_block_size
        sb0 = partition_start + 1024 // bs
        sb1 = partition_start + (2048 + bs - 1) // bs
        windows = [
            LbaWindow(0, 1, "lba0"),
            LbaWindow(partition_start, partition_start + max(1, 1024 // bs), "partition-start"),
            LbaWindow(sb0, sb1, "superblock"),
            LbaWindow(inode_table[0], inode_table[0] + inode_table[1], "inode-table"),
        ]
        return cls(name, windows, log)


def matches_offline(windows, reads) -> int | None:
    """Index of the read that completes the ordered pattern, or None."""
    k = 0
    for i, (lba, count) in enumerate(reads):
        while k < len(windows) and windows[k].hit(lba, count):
            k += 1
            if k == len(windows):
                return i
    return None
