"""Streaming multi-pattern search (Aho-Corasick) over the device write stream.

The automaton is compiled to a dense transition table so the scan is a
single table lookup per byte.  Matcher state carries across chunks, so the
reported matches do not depend on how the stream is cut into commands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np


class Match(NamedTuple):
    offset: int  # stream offset of the first byte
    key: int     # pattern index


@numba.njit(cache=True)
def _build(flat, starts, lengths, n_states):
    goto = np.full((n_states, 256), -1, dtype=np.int32)
    term = np.full(n_states, -1, dtype=np.int32)
    fail = np.zeros(n_states, dtype=np.int32)
    dict_link = np.full(n_states, -1, dtype=np.int32)
    used = 1
    for p in range(len(starts)):
        s = 0
        for i in range(lengths[p]):
            c = flat[starts[p] + i]
            nxt = goto[s, c]
            if nxt == -1:
                nxt = used
                used += 1
                goto[s, c] = nxt
            s = nxt
        term[s] = p
    queue = np.empty(used, dtype=np.int32)
    head = 0
    tail = 0
    for c in range(256):
        u = goto[0, c]
        if u == -1:
            goto[0, c] = 0
        else:
            fail[u] = 0
            queue[tail] = u
            tail += 1
    while head < tail:
        s = queue[head]
        head += 1
        f = fail[s]
        dict_link[s] = f if term[f] >= 0 else dict_link[f]
        for c in range(256):
            u = goto[s, c]
            if u == -1:
                # rows of shallower states are already complete
                goto[s, c] = goto[f, c]
            else:
                fail[u] = goto[f, c]
                queue[tail] = u
                tail += 1
    return goto[:used].copy(), term[:used].copy(), dict_link[:used].copy()


@numba.njit(cache=True)
def _scan(goto, term, dict_link, lengths, data, start, state, base, out_off, out_key):
    """Run from data[start:]; stop early when the output buffers fill up."""
    n = 0
    cap = len(out_off)
    i = start
    while i < len(data):
        state = goto[state, data[i]]
        if term[state] >= 0 or dict_link[state] >= 0:
            if n + len(lengths) > cap:
                # undo this byte so the caller can resume at i with bigger buffers
                return i, n, state, True
            t = state if term[state] >= 0 else dict_link[state]
            while t >= 0:
                p = term[t]
                out_off[n] = base + i - lengths[p] + 1
                out_key[n] = p
                n += 1
                t = dict_link[t]
        i += 1
    return i, n, state, False


@numba.njit(cache=True)
def _count(goto, term, dict_link, data, state):
    hits = 0
    for i in range(len(data)):
        state = goto[state, data[i]]
        t = state if term[state] >= 0 else dict_link[state]
        while t >= 0:
            hits += 1
            t = dict_link[t]
    return hits, state


class Automaton:
    def __init__(self, patterns):
        patterns = [bytes(p) for p in patterns]
        if any(len(p) == 0 for p in patterns):
            raise ValueError("empty pattern")
        if len(set(patterns)) != len(patterns):
            raise ValueError("patterns must be pairwise distinct")
        self.patterns = patterns
        self.lengths = np.array([len(p) for p in patterns], dtype=np.int64)
        self.max_len = int(self.lengths.max()) if patterns else 0
        if patterns:
            flat = np.frombuffer(b"".join(patterns), dtype=np.uint8)
            starts = np.concatenate(([0], np.cumsum(self.lengths)[:-1])).astype(np.int64)
            self.goto, self.term, self.dict_link = _build(flat, starts, self.lengths, int(self.lengths.sum()) + 1)
        else:
            self.goto = np.zeros((1, 256), dtype=np.int32)
            self.term = np.full(1, -1, dtype=np.int32)
            self.dict_link = np.full(1, -1, dtype=np.int32)

    @property
    def n_states(self) -> int:
        return len(self.term)


@dataclass
class MatcherState:
    automaton: Automaton
    state: int = 0
    offset: int = 0  # bytes consumed so far
    carry: bytes = b""
    matches: int = 0
    buffer_size: int = field(default=4096, repr=False)

    @classmethod
    def for_patterns(cls, patterns) -> "MatcherState":
        return cls(Automaton(patterns))

    def reset(self) -> None:
        self.state = 0
        self.offset = 0
        self.carry = b""


def _as_array(chunk) -> np.ndarray:
    if isinstance(chunk, np.ndarray):
        return chunk.astype(np.uint8, copy=False)
    return np.frombuffer(chunk, dtype=np.uint8)


def scan_write_stream(chunk, st: MatcherState) -> list[Match]:
    """Matches completed by ``chunk``; offsets are absolute stream offsets."""
    a = st.automaton
    data = _as_array(chunk)
    out: list[Match] = []
    if a.patterns:
        pos = 0
        state = st.state
        while True:
            off = np.empty(st.buffer_size, dtype=np.int64)
            key = np.empty(st.buffer_size, dtype=np.int32)
            pos, n, state, full = _scan(a.goto, a.term, a.dict_link, a.lengths, data, pos, state, st.offset,
                                        off, key)
            out.extend(Match(int(o), int(k)) for o, k in zip(off[:n], key[:n]))
            if not full:
                break
            st.buffer_size *= 4
        st.state = int(state)
    keep = max(a.max_len - 1, 0)
    if keep:
        st.carry = (st.carry + bytes(data[-keep:]))[-keep:] if len(data) < keep else bytes(data[-keep:])
    st.offset += len(data)
    st.matches += len(out)
    return out


def count_matches(chunk, st: MatcherState) -> int:
    """Number of matches in ``chunk`` without materialising them (bulk scans)."""
    a = st.automaton
    data = _as_array(chunk)
    if not a.patterns:
        st.offset += len(data)
        return 0
    hits, state = _count(a.goto, a.term, a.dict_link, data, st.state)
    st.state = int(state)
    st.offset += len(data)
    st.matches += int(hits)
    keep = a.max_len - 1
    if keep:
        st.carry = (st.carry + bytes(data[-keep:]))[-keep:]
    return int(hits)


def find_all(stream: bytes, patterns) -> list[Match]:
    """Reference search: every (possibly overlapping) occurrence via bytes.find."""
    out = []
    for k, p in enumerate(patterns):
        i = stream.find(p)
        while i >= 0:
            out.append(Match(i, k))
            i = stream.find(p, i + 1)
    return sorted(out)
