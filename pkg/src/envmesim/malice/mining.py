"""Rule-based file mining and the device-private quarantine store."""

from __future__ import annotations

import fnmatch
import hashlib
from dataclasses import dataclass

from ..diskfs.errors import DiskfsError
from ..diskfs.ext2 import Ext2

DEFAULT_QUOTA = 1 << 20
MAX_CONTENT_SCAN = 16 << 20


class QuotaExceeded(Exception):
    pass


@dataclass(frozen=True)
class MiningRule:
    glob: str | None = None
    content: bytes | None = None

    def __post_init__(self):
        if (self.glob is None) == (self.content is None):
            raise ValueError("a mining rule has exactly one of glob or content")

    @classmethod
    def parse(cls, d) -> "MiningRule":
        if isinstance(d, str):
            return cls(glob=d)
        if "glob" in d:
            return cls(glob=d["glob"])
        if "content" in d:
            return cls(content=d["content"].encode())
        if "content_hex" in d:
            return cls(content=bytes.fromhex(d["content_hex"]))
        raise ValueError(f"bad mining rule {d!r}")


@dataclass(frozen=True)
class QuarantineEntry:
    qid: str
    path: str
    content: bytes

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.content).hexdigest()


class QuarantineStore:
    """Device-internal storage.  Nothing here is reachable through any LBA."""

    def __init__(self, quota: int = DEFAULT_QUOTA, log=None, channel: str = "abstract"):
        self.quota = quota
        self.log = log
        self.channel = channel
        self.entries: dict[str, QuarantineEntry] = {}
        self.used = 0
        self._seq = 0

    def quarantine_file(self, path: str, content: bytes) -> str:
        if self.used + len(content) > self.quota:
            raise QuotaExceeded(f"{path}: {len(content)} bytes, {self.quota - self.used} free")
        self._seq += 1
        qid = f"q{self._seq:04d}"
        entry = QuarantineEntry(qid, path, bytes(content))
        self.entries[qid] = entry
        self.used += len(content)
        if self.log is not None:
            self.log.emit("malice", "exfil", id=qid, path=path, size=len(content), sha256=entry.sha256,
                          channel=self.channel)
        return qid

    def __contains__(self, qid) -> bool:
        return qid in self.entries


def mine_files(view, partition, rules, store: QuarantineStore, log=None) -> list[str]:
    """Walk the filesystem read-only and quarantine every file a rule matches."""
    try:
        fs = Ext2(view, partition)
        files = list(fs.walk())
    except DiskfsError as exc:
        if log is not None:
            log.emit("malice", "mine-skipped", reason=str(exc))
        return []
    globs = [r.glob for r in rules if r.glob is not None]
    needles = [r.content for r in rules if r.content is not None]
    ids = []
    for path, ino in files:
        hit = any(fnmatch.fnmatchcase(path, g) for g in globs)
        content = None
        if not hit and needles and ino.size <= MAX_CONTENT_SCAN:
            content = fs.read_inode_data(ino)
            hit = any(n in content for n in needles)
        if hit:
            if content is None:
                content = fs.read_inode_data(ino)
            ids.append(store.quarantine_file(path, content))
    return ids
