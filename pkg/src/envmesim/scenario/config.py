"""Scenario files: TOML tables describing device, host, image, attacker and checks."""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field

import tomli

from ..device.registers import NVME_CLASS_CODE
from ..malice.activation import ActivationKey
from ..malice.engine import Playbook, PlaybookError
from .imagebuilder import BuildError, ImageSpec

MiB = 1 << 20
ACTIONS = ("boot", "shutdown", "reboot", "driver-init", "write", "read", "trace", "advance", "host-step",
           "snapshot", "mutate", "flush")
ASSERTION_TYPES = ("event", "absent", "order", "state")
TOP_LEVEL = ("scenario", "device", "host", "image", "malice", "actions", "assert")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = f"{source or '<config>'}" + (f":{line}" if line else "")
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass
class ScenarioConfig:
    name: str
    summary: str = ""
    description: str = ""
    seed: int = 0
    device: dict = field(default_factory=dict)
    host: dict = field(default_factory=dict)
    image: ImageSpec | None = None
    keys: list[ActivationKey] = field(default_factory=list)
    playbooks: list[Playbook] = field(default_factory=list)
    detectors: dict = field(default_factory=dict)
    malice: dict = field(default_factory=dict)
    actions: list[dict] = field(default_factory=list)
    assertions: list[dict] = field(default_factory=list)
    base_dir: str | None = None
    source: str | None = None


def _line_of(text: str, pattern: str, nth: int = 0) -> int | None:
    hits = [m.start() for m in re.finditer(pattern, text, re.M)]
    if nth < len(hits):
        return text.count("\n", 0, hits[nth]) + 1
    return None


def key_pattern(k: dict, seed: int) -> bytes:
    if "hex" in k:
        return bytes.fromhex("".join(k["hex"].split()))
    if "text" in k:
        return k["text"].encode()
    if "random_bytes" in k:
        return hashlib.shake_256(f"key:{seed}:{k['id']}".encode()).digest(int(k["random_bytes"]))
    raise ValueError(f"key {k.get('id')!r} needs hex, text or random_bytes")


def parse_config(text: str, source: str | None = None, base_dir: str | None = None,
                 seed: int | None = None) -> ScenarioConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(str(exc), int(m.group(1)) if m else None, source) from None

    def fail(msg, pattern=None, nth=0):
        raise ConfigError(msg, _line_of(text, pattern, nth) if pattern else None, source)

    unknown = set(raw) - set(TOP_LEVEL)
    if unknown:
        fail(f"unknown section(s): {', '.join(sorted(unknown))}", rf"^\[+\s*{re.escape(sorted(unknown)[0])}")
    sc = raw.get("scenario", {})
    if "name" not in sc:
        fail("[scenario] needs a name", r"^\[scenario\]")
    cfg = ScenarioConfig(name=sc["name"], summary=sc.get("summary", ""), description=sc.get("description", ""),
                         seed=int(sc.get("seed", 0) if seed is None else seed), base_dir=base_dir, source=source)
    cfg.device = dict(raw.get("device", {}))
    cfg.device.setdefault("class_code", NVME_CLASS_CODE)
    cfg.host = dict(raw.get("host", {}))
    if "image" in raw:
        try:
            img = dict(raw["image"])
            img.setdefault("seed", cfg.seed)
            if seed is not None:
                img["seed"] = seed
            cfg.image = ImageSpec.from_dict(img, base_dir)
        except (BuildError, TypeError, ValueError) as exc:
            fail(f"[image]: {exc}", r"^\[image")
    mal = dict(raw.get("malice", {}))
    for i, k in enumerate(mal.pop("keys", [])):
        try:
            cfg.keys.append(ActivationKey(k["id"], key_pattern(k, cfg.seed), k.get("action")))
        except (KeyError, ValueError) as exc:
            fail(f"malice key #{i + 1}: {exc}", r"^\[\[malice\.keys\]\]", i)
    for i, p in enumerate(mal.pop("playbooks", [])):
        try:
            cfg.playbooks.append(Playbook.parse(p))
        except PlaybookError as exc:
            fail(f"playbook #{i + 1}: {exc}", r"^\[\[malice\.playbooks\]\]", i)
    cfg.detectors = mal.pop("detectors", {})
    cfg.malice = mal
    for i, a in enumerate(raw.get("actions", [])):
        if a.get("action") not in ACTIONS:
            fail(f"action #{i + 1}: unknown action {a.get('action')!r}; expected one of {', '.join(ACTIONS)}",
                 r"^\[\[actions\]\]", i)
        if a["action"] == "trace" and "file" in a and base_dir is not None:
            if not os.path.exists(os.path.join(base_dir, a["file"])):
                fail(f"action #{i + 1}: trace file {a['file']} not found", r"^\[\[actions\]\]", i)
        cfg.actions.append(dict(a))
    names = set()
    for i, a in enumerate(raw.get("assert", [])):
        name = a.get("name")
        if not name:
            fail(f"assertion #{i + 1} has no name", r"^\[\[assert\]\]", i)
        if name in names:
            fail(f"duplicate assertion name {name!r}", r"^\[\[assert\]\]", i)
        names.add(name)
        a = dict(a)
        a.setdefault("type", "event")
        if a["type"] not in ASSERTION_TYPES:
            fail(f"assertion {name!r}: unknown type {a['type']!r}", r"^\[\[assert\]\]", i)
        cfg.assertions.append(a)
    return cfg


def load_config(path: str, seed: int | None = None) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, source=path, base_dir=os.path.dirname(os.path.abspath(path)), seed=seed)
