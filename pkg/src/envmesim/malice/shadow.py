"""Read shadowing: substitute payload bytes for whole LBAs on the read path."""

from __future__ import annotations

from dataclasses import dataclass, field

POLICIES = ("first-read-once", "boot-gated", "always")


class RuleConflict(ValueError):
    pass


class SizeOverflow(ValueError):
    pass


@dataclass
class ShadowRule:
    lba_ranges: list[tuple[int, int]]  # (lba, count), in payload order
    payload: bytes
    policy: str = "first-read-once"
    gate: str | None = None
    name: str = ""
    consumed: bool = False
    served: int = 0
    last_epoch: int = field(default=-1, repr=False)
    epoch_blocks: set = field(default_factory=set, repr=False)

    @property
    def covered_blocks(self) -> int:
        return sum(c for _, c in self.lba_ranges)


class ShadowTable:
    def __init__(self, block_size: int, namespace_blocks: int, log=None):
        self.block_size = block_size
        self.namespace_blocks = namespace_blocks
        self.log = log
        self.rules: dict[int, ShadowRule] = {}
        self.detectors: dict = {}
        self._next_id = 1

    def _emit(self, kind, **detail):
        if self.log is not None:
            self.log.emit("malice", kind, **detail)

    def register_detector(self, name: str, detector) -> None:
        self.detectors[name] = detector

    def install(self, rule: ShadowRule) -> int:
        if rule.policy not in POLICIES:
            raise ValueError(f"unknown shadow policy {rule.policy!r}")
        if rule.policy == "boot-gated" and rule.gate not in self.detectors:
            raise ValueError(f"boot-gated rule needs a registered gate, got {rule.gate!r}")
        if not rule.lba_ranges:
            raise ValueError("shadow rule covers no blocks")
        for lba, count in rule.lba_ranges:
            if count <= 0 or lba < 0 or lba + count > self.namespace_blocks:
                raise ValueError(f"range ({lba}, {count}) outside the namespace")
        spans = sorted(rule.lba_ranges)
        for (a, n), (b, _) in zip(spans, spans[1:]):
            if a + n > b:
                raise RuleConflict("rule ranges overlap each other")
        for rid, other in self.rules.items():
            for a, n in rule.lba_ranges:
                for b, m in other.lba_ranges:
                    if a < b + m and b < a + n:
                        raise RuleConflict(f"blocks [{a}, {a + n}) already shadowed by rule {rid}")
        size = rule.covered_blocks * self.block_size
        if len(rule.payload) > size:
            raise SizeOverflow(f"payload of {len(rule.payload)} bytes exceeds the {size} covered bytes")
        rule.payload = rule.payload.ljust(size, b"\0")
        rid = self._next_id
        self._next_id += 1
        self.rules[rid] = rule
        self._emit("shadow-installed", rule=rid, name=rule.name, policy=rule.policy, gate=rule.gate,
                   ranges=[list(r) for r in rule.lba_ranges])
        return rid

    def remove(self, rid: int) -> None:
        self.rules.pop(rid, None)

    def _blocks_to_serve(self, rule: ShadowRule, hits) -> list[tuple[int, int]]:
        """(device lba, payload block) pairs this read receives from ``rule``."""
        pairs = [(a + k, p + k) for a, b, p in hits for k in range(b - a)]
        if rule.policy == "always":
            return pairs
        if rule.policy == "first-read-once":
            return [] if rule.consumed else pairs
        det = self.detectors[rule.gate]
        if not det.fired:
            return []
        # each covered block is delivered once per detector firing
        if rule.last_epoch != det.epoch:
            rule.last_epoch = det.epoch
            rule.epoch_blocks = set()
        return [(lba, p) for lba, p in pairs if p not in rule.epoch_blocks]

    def apply(self, lba: int, count: int, genuine: bytes) -> bytes:
        """Splice payload blocks over the covered part of a read."""
        out = None
        bs = self.block_size
        end = lba + count
        for rid, rule in self.rules.items():
            hits = []
            pos = 0
            for r0, n in rule.lba_ranges:
                a, b = max(lba, r0), min(end, r0 + n)
                if a < b:
                    hits.append((a, b, pos + (a - r0)))
                pos += n
            if not hits:
                continue
            pairs = self._blocks_to_serve(rule, hits)
            if not pairs:
                continue
            if out is None:
                out = bytearray(genuine)
            for dev, p in pairs:
                out[(dev - lba) * bs:(dev - lba + 1) * bs] = rule.payload[p * bs:(p + 1) * bs]
            rule.served += 1
            if rule.policy == "first-read-once":
                rule.consumed = True
            elif rule.policy == "boot-gated":
                rule.epoch_blocks.update(p for _, p in pairs)
            self._emit("shadow-served", rule=rid, name=rule.name, policy=rule.policy, lba=lba, count=count,
                       blocks=len(pairs))
        return genuine if out is None else bytes(out)
