"""Byte-accurate NVMe controller model."""

from .controller import (Controller, CompletionQueue, QueuePair, ShutdownWindow, SubmissionQueue, Tap,
                         WindowOverrun, MAX_TRANSFER)
from .wire import CompletionEntry, SubmissionEntry

__all__ = [
    "CompletionEntry", "CompletionQueue", "Controller", "MAX_TRANSFER", "QueuePair", "ShutdownWindow",
    "SubmissionEntry", "SubmissionQueue", "Tap", "WindowOverrun",
]
