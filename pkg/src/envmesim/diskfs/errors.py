class DiskfsError(Exception):
    pass


class NoPartitionTable(DiskfsError):
    pass


class CorruptTable(DiskfsError):
    pass


class UnsupportedFilesystem(DiskfsError):
    pass


class CorruptFilesystem(DiskfsError):
    pass


class NotFound(DiskfsError):
    pass


class UnsupportedLink(DiskfsError):
    pass


class AlignmentError(DiskfsError):
    pass
