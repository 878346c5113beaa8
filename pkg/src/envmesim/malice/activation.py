"""Activation keys hidden in written data, and ordered multi-key arming."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

from .matcher import MatcherState, scan_write_stream

MIN_KEY_BYTES = 16
RECOMMENDED_KEY_BYTES = 128


class InvalidKey(ValueError):
    pass


class WeakKeyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ActivationKey:
    key_id: str
    pattern: bytes
    action: str | None = None  # playbook id
    sequence_position: int | None = None


def validate_keys(keys) -> list[ActivationKey]:
    keys = list(keys)
    ids = [k.key_id for k in keys]
    if len(set(ids)) != len(ids):
        raise InvalidKey("duplicate key ids")
    if len({k.pattern for k in keys}) != len(keys):
        raise InvalidKey("key patterns must be pairwise distinct")
    for k in keys:
        if len(k.pattern) < MIN_KEY_BYTES:
            raise InvalidKey(f"key {k.key_id}: {len(k.pattern)} bytes, minimum is {MIN_KEY_BYTES}")
        if len(k.pattern) < RECOMMENDED_KEY_BYTES:
            warnings.warn(f"key {k.key_id} is shorter than {RECOMMENDED_KEY_BYTES} bytes", WeakKeyWarning,
                          stacklevel=3)
    return keys


class SequenceTracker:
    """Arms once the keys arrive in order.

    Repeating the key that was just accepted keeps progress; any other key
    of the sequence arriving out of order resets progress, after which it
    is re-checked as a possible first key.  Keys outside the sequence are
    ignored.
    """

    def __init__(self, sequence):
        if not sequence:
            raise ValueError("empty key sequence")
        self.sequence = list(sequence)
        self.progress = 0
        self.armed = False

    def feed(self, key_id: str) -> str:
        """Returns one of: ignored, advanced, repeated, reset, armed."""
        if self.armed or key_id not in self.sequence:
            return "ignored"
        seq = self.sequence
        if seq[self.progress] == key_id:
            self.progress += 1
            if self.progress == len(seq):
                self.armed = True
                return "armed"
            return "advanced"
        if self.progress and seq[self.progress - 1] == key_id:
            return "repeated"
        self.progress = 1 if seq[0] == key_id else 0
        return "reset"

    def reset(self) -> None:
        self.progress = 0
        self.armed = False


class ActivationScanner:
    """Feeds every written byte to the matcher and reports key ids in stream order."""

    def __init__(self, keys):
        self.keys = validate_keys(keys)
        self.state = MatcherState.for_patterns([k.pattern for k in self.keys])

    def feed(self, data: bytes) -> list[tuple[str, int]]:
        return [(self.keys[m.key].key_id, m.offset) for m in scan_write_stream(data, self.state)]
