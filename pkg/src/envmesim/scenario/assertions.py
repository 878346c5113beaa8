"""Checks evaluated against the event log and final machine state."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass


@dataclass
class AssertionResult:
    name: str
    passed: bool
    message: str
    first_violation: dict | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "message": self.message,
                "first_violation": self.first_violation}


def resolve_refs(value, manifest: dict | None):
    """Replace ``@manifest:<path>:<field>`` strings with the builder's recorded value."""
    if isinstance(value, dict):
        return {k: resolve_refs(v, manifest) for k, v in value.items()}
    if isinstance(value, list):
        return [resolve_refs(v, manifest) for v in value]
    if isinstance(value, str) and value.startswith("@manifest:"):
        path, _, fld = value[len("@manifest:"):].rpartition(":")
        for part in (manifest or {}).get("partitions", []):
            for f in part["files"]:
                if f["path"] == path:
                    return f[fld]
        raise KeyError(f"manifest has no file {path}")
    return value


def _matcher(spec: dict, manifest):
    kind, actor = spec.get("kind"), spec.get("actor")
    where = resolve_refs(spec.get("where", {}), manifest)
    return lambda e: e.matches(kind, actor, **where)


def _describe(spec: dict) -> str:
    s = spec.get("kind", "*")
    if spec.get("where"):
        s += " " + ", ".join(f"{k}={v}" for k, v in spec["where"].items())
    return s


def check_event(a: dict, events, manifest) -> AssertionResult:
    match = _matcher(a, manifest)
    hits = [e for e in events if match(e)]
    lo = a.get("count", a.get("min", 1))
    hi = a.get("count", a.get("max"))
    if "within" in a:
        opener, closer = (_matcher({"kind": k} if isinstance(k, str) else k, manifest) for k in a["within"])
        inside = False
        for e in events:
            if opener(e):
                inside = True
            elif closer(e):
                inside = False
            elif match(e) and not inside:
                return AssertionResult(a["name"], False, f"{_describe(a)} outside {a['within']}", e.to_dict())
    if len(hits) < lo:
        return AssertionResult(a["name"], False, f"expected at least {lo} x {_describe(a)}, saw {len(hits)}")
    if hi is not None and len(hits) > hi:
        return AssertionResult(a["name"], False, f"expected at most {hi} x {_describe(a)}, saw {len(hits)}",
                               hits[hi].to_dict())
    return AssertionResult(a["name"], True, f"{len(hits)} x {_describe(a)}")


def check_absent(a: dict, events, manifest) -> AssertionResult:
    match = _matcher(a, manifest)
    for e in events:
        if match(e):
            return AssertionResult(a["name"], False, f"unexpected {_describe(a)}", e.to_dict())
    return AssertionResult(a["name"], True, f"no {_describe(a)}")


def check_order(a: dict, events, manifest) -> AssertionResult:
    """First occurrences of the listed events must appear in the given order."""
    items = [{"kind": k} if isinstance(k, str) else k for k in a["sequence"]]
    positions = []
    for spec in items:
        match = _matcher(spec, manifest)
        first = next((e for e in events if match(e)), None)
        if first is None:
            return AssertionResult(a["name"], False, f"{_describe(spec)} never happened")
        positions.append(first)
    for prev, cur, spec in zip(positions, positions[1:], items[1:]):
        if cur.seq <= prev.seq:
            return AssertionResult(a["name"], False, f"{_describe(spec)} happened before its predecessor",
                                   cur.to_dict())
    return AssertionResult(a["name"], True, " < ".join(_describe(s) for s in items))


def _state_value(check: str, a: dict, tb):
    if check == "device-enabled":
        return tb.bus.is_enabled(tb.ctrl.device_id)
    if check == "driver-state":
        return tb.host.driver.state if tb.host.driver else "unbound"
    if check == "host-state":
        return tb.host.state
    if check == "module-executed":
        return tb.memory.module_executed
    if check == "backend-mode":
        return tb.store.mode
    if check == "csts-ready":
        return tb.ctrl.regs.ready
    if check == "completions":
        return tb.ctrl.completions
    if check == "iommu-enabled":
        return tb.bus.iommu.enabled
    if check == "quarantine-count":
        return len(tb.malice.quarantine.entries)
    if check == "disk-file-sha256":
        from ..diskfs import Ext2, StoreView, parse_partitions

        view = StoreView(tb.store)
        fs = Ext2(view, parse_partitions(view)[int(a.get("partition", 0))])
        return hashlib.sha256(fs.read_file(a["path"])).hexdigest()
    raise KeyError(f"unknown state check {check!r}")


def check_state(a: dict, tb, manifest) -> AssertionResult:
    try:
        got = _state_value(a["check"], a, tb)
    except Exception as exc:  # a broken probe is a failed check, not a crashed run
        return AssertionResult(a["name"], False, f"state {a['check']}: {exc}")
    want = resolve_refs(a.get("expect"), manifest)
    ok = got == want
    return AssertionResult(a["name"], ok, f"{a['check']} = {got!r}" + ("" if ok else f", expected {want!r}"))


def evaluate(assertions, tb, manifest=None) -> list[AssertionResult]:
    events = tb.log.events
    out = []
    for a in assertions:
        try:
            if a["type"] == "state":
                out.append(check_state(a, tb, manifest))
            else:
                fn = {"event": check_event, "absent": check_absent, "order": check_order}[a["type"]]
                out.append(fn(a, events, manifest))
        except KeyError as exc:
            out.append(AssertionResult(a["name"], False, f"bad assertion: {exc}"))
    return out
