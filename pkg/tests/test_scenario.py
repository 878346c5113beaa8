import json
import subprocess
import sys

import pytest

from envmesim.events import EventLog
from envmesim.scenario import ConfigError, parse_config, run_scenario
from envmesim.scenario.assertions import check_event, check_order, resolve_refs
from envmesim.scenario.cli import bundled_names, load_bundled, main
from envmesim.scenario.runner import http_cache_blob

BASE = """
[scenario]
name = "t"
seed = 3

[image]
size_mib = 16
[[image.files]]
path = "/boot/grub/grub.cfg"
text = "menuentry 'L' {\\n  linux /boot/vmlinuz root=/dev/nvme0n1p1 ro\\n}\\n"
[[image.files]]
path = "/sbin/init"
size = 4096
mode = "755"
"""


def _cfg(extra: str, **kw):
    return parse_config(BASE + extra, source="t.toml", **kw)


# config
@pytest.mark.parametrize("text,line,needle", [
    ("[scenario]\nname = 'x'\n[bogus]\n", 3, "unknown section"),
    ("[scenario]\nsummary = 'x'\n", 1, "needs a name"),
    ("[scenario]\nname = 'x'\n\n[[actions]]\naction = 'boot'\n[[actions]]\naction = 'fly'\n", 6, "unknown action"),
    ("[scenario]\nname = 'x'\n[[assert]]\nkind = 'boot-complete'\n", 3, "no name"),
    ("[scenario]\nname = 'x'\n[[assert]]\nname = 'a'\n[[assert]]\nname = 'a'\n", 5, "duplicate"),
    ("[scenario]\nname = 'x'\n[[assert]]\nname = 'a'\ntype = 'vibe'\n", 3, "unknown type"),
    ("[scenario]\nname = 'x'\n[[malice.keys]]\nid = 'k'\n", 3, "needs hex"),
    ("[scenario]\nname = 'x'\n[[malice.playbooks]]\nid = 'p'\ntrigger = {}\n", 3, "trigger"),
    ("[scenario]\nname = 'x'\nseed = = 1\n", 3, ""),
])
def test_config_errors_carry_line(text, line, needle):
    with pytest.raises(ConfigError) as ei:
        parse_config(text, source="bad.toml")
    assert ei.value.line == line
    assert str(ei.value).startswith(f"bad.toml:{line}: ")
    assert needle in str(ei.value)


def test_config_image_error_points_at_image_table():
    with pytest.raises(ConfigError) as ei:
        parse_config("[scenario]\nname = 'x'\n\n[image]\nsize_mib = 16\nwat = 1\n", source="s")
    assert ei.value.line == 4


def test_seed_override_and_random_key():
    a = _cfg("[[malice.keys]]\nid = 'k'\nrandom_bytes = 128\n")
    b = _cfg("[[malice.keys]]\nid = 'k'\nrandom_bytes = 128\n", seed=99)
    assert a.seed == 3 and b.seed == 99 and b.image.seed == 99
    assert len(a.keys[0].pattern) == 128 and a.keys[0].pattern != b.keys[0].pattern


# assertions
def _log(*kinds):
    log = EventLog()
    for k in kinds:
        if isinstance(k, tuple):
            log.emit("x", k[0], **k[1])
        else:
            log.emit("x", k)
    return log.events


def test_event_counts_and_window():
    ev = _log("open", ("hit", {"n": 1}), "close", ("hit", {"n": 2}))
    assert check_event({"name": "a", "kind": "hit", "count": 2}, ev, None).passed
    assert not check_event({"name": "a", "kind": "hit", "max": 1}, ev, None).passed
    r = check_event({"name": "a", "kind": "hit", "within": ["open", "close"]}, ev, None)
    assert not r.passed and r.first_violation["detail"] == {"n": 2}
    assert check_event({"name": "a", "kind": "hit", "where": {"n": 1}, "within": ["open", "close"]}, ev, None).passed


def test_order_uses_first_occurrence():
    ev = _log("b", "a", "b", "c")
    assert not check_order({"name": "o", "sequence": ["a", "b"]}, ev, None).passed
    assert check_order({"name": "o", "sequence": ["b", "a", "c"]}, ev, None).passed
    assert "never happened" in check_order({"name": "o", "sequence": ["a", "z"]}, ev, None).message


def test_manifest_refs():
    manifest = {"partitions": [{"files": [{"path": "/f", "sha256": "abc"}]}]}
    assert resolve_refs({"x": ["@manifest:/f:sha256", 1]}, manifest) == {"x": ["abc", 1]}
    with pytest.raises(KeyError):
        resolve_refs("@manifest:/g:sha256", manifest)


def test_http_cache_blob_places_key():
    key = bytes(range(128))
    blob = http_cache_blob(key, 450)
    assert blob[450:578] == key and blob.count(key) == 1


# runner
def test_runner_reports_failures_with_first_violation(tmp_path):
    cfg = _cfg("""
[[actions]]
action = "boot"
[[actions]]
action = "read"
lba = 0
count = 1
[[assert]]
name = "never-reads"
type = "absent"
kind = "read"
[[assert]]
name = "booted"
kind = "boot-complete"
""")
    rep = run_scenario(cfg, str(tmp_path / "log.jsonl"))
    assert not rep.passed
    assert [r.passed for r in rep.results] == [False, True]
    assert rep.results[0].first_violation["kind"] == "read"
    assert "first violating event" in rep.summary()
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["kind"] == "scenario-start" and json.loads(lines[-1])["kind"] == "scenario-end"


def test_action_error_is_logged_not_raised():
    rep = run_scenario(_cfg('[[actions]]\naction = "read"\nlba = 0\ncount = 1\n'
                            '[[assert]]\nname = "err"\nkind = "action-error"\n'))
    assert rep.passed
    assert rep.log.first("action-error").detail["action"] == "read"


def test_read_file_reports_genuine():
    rep = run_scenario(_cfg('[[actions]]\naction = "boot"\n[[actions]]\naction = "read"\npath = "/sbin/init"\n'
                            '[[assert]]\nname = "g"\nkind = "read-file"\nwhere = { genuine = true, '
                            'sha256 = "@manifest:/sbin/init:sha256" }\n'))
    assert rep.passed, rep.summary()


@pytest.mark.parametrize("name", ["init-shadow", "dos-cipher", "iommu-bypass-grub"])
def test_runs_are_byte_identical(tmp_path, name):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run_scenario(load_bundled(name), str(a))
    run_scenario(load_bundled(name), str(b))
    assert a.read_bytes() == b.read_bytes()


def test_different_seed_changes_log(tmp_path):
    a = run_scenario(load_bundled("cookie-activation"))
    b = run_scenario(load_bundled("cookie-activation", seed=1234))
    assert a.log.to_jsonl() != b.log.to_jsonl()
    assert b.passed, b.summary()


# CLI
def test_bundled_set():
    names = bundled_names()
    assert len(names) >= 8
    for n in names:
        cfg = load_bundled(n)
        assert cfg.name == n and cfg.summary and cfg.assertions


def test_cli_list_and_describe(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    assert all(n in out for n in bundled_names())
    assert main(["describe", "dos-brick"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("dos-brick: ") and "checks: " in out


def test_cli_unknown_scenario(capsys):
    assert main(["run", "no-such-scenario"]) == 2
    assert "envmesim: error:" in capsys.readouterr().err
    assert main(["describe", "nope"]) == 2


def test_cli_run_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.toml"
    good.write_text(BASE + '[[actions]]\naction = "boot"\n[[assert]]\nname = "b"\nkind = "boot-complete"\n')
    bad = tmp_path / "bad.toml"
    bad.write_text(BASE + '[[actions]]\naction = "boot"\n[[assert]]\nname = "b"\nkind = "boot-failed"\n')
    report = tmp_path / "r.json"
    assert main(["run", str(good), "--report", str(report), "--log", str(tmp_path / "l.jsonl")]) == 0
    assert json.loads(report.read_text())["passed"] is True
    assert main(["run", str(bad)]) == 1
    broken = tmp_path / "broken.toml"
    broken.write_text("[scenario\n")
    assert main(["run", str(broken)]) == 2


def test_cli_build_image(tmp_path):
    spec = tmp_path / "img.toml"
    spec.write_text('[image]\nsize_mib = 16\n[[image.files]]\npath = "/a.txt"\ntext = "hi"\n')
    out = tmp_path / "disk.img"
    assert main(["build-image", str(spec), "-o", str(out)]) == 0
    assert out.stat().st_size == 16 << 20
    manifest = json.loads((tmp_path / "disk.img.manifest.json").read_text())
    assert manifest["partitions"][0]["files"][0]["path"] == "/a.txt"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "envmesim", "run", "spoof-never-ready"], capture_output=True,
                          text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "PASS" in proc.stdout
