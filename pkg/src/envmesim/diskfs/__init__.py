"""Read-only partition table and ext2 parsing over block views."""

from .errors import (AlignmentError, CorruptFilesystem, CorruptTable, DiskfsError, NoPartitionTable, NotFound,
                     UnsupportedFilesystem, UnsupportedLink)
from .ext2 import Ext2, Extent, ExtentMap, LbaRange, read_file, resolve_path, to_absolute_lbas
from .partitions import PartitionEntry, parse_partitions
from .view import ImageView, StoreView, read_bytes

__all__ = [
    "AlignmentError", "CorruptFilesystem", "CorruptTable", "DiskfsError", "Ext2", "Extent", "ExtentMap",
    "ImageView", "LbaRange", "NoPartitionTable", "NotFound", "PartitionEntry", "StoreView", "UnsupportedFilesystem",
    "UnsupportedLink", "parse_partitions", "read_bytes", "read_file", "resolve_path", "to_absolute_lbas",
]
