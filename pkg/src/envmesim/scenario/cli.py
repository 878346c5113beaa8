"""``envmesim`` command line: run, build-image, list, describe."""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import tomli

from .config import ConfigError, load_config, parse_config
from .imagebuilder import BuildError, ImageSpec, build_image
from .runner import run_scenario


def bundled_names() -> list[str]:
    files = resources.files(__package__).joinpath("bundled")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".toml"))


def load_bundled(name: str, seed: int | None = None):
    res = resources.files(__package__).joinpath("bundled", name + ".toml")
    if not res.is_file():
        raise ConfigError(f"no bundled scenario named {name!r}")
    with resources.as_file(res) as path:
        return parse_config(res.read_text(encoding="utf-8"), source=f"bundled:{name}",
                            base_dir=os.path.dirname(str(path)), seed=seed)


def resolve(target: str, seed: int | None = None):
    if os.path.exists(target):
        return load_config(target, seed)
    return load_bundled(target, seed)


def cmd_run(args) -> int:
    cfg = resolve(args.config, args.seed)
    report = run_scenario(cfg, args.log)
    print(report.summary())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=1)
    return 0 if report.passed else 1


def cmd_build_image(args) -> int:
    with open(args.spec, "rb") as fh:
        raw = tomli.load(fh)
    spec = ImageSpec.from_dict(raw.get("image", raw), os.path.dirname(os.path.abspath(args.spec)))
    built = build_image(spec)
    built.save(args.output)
    nfiles = sum(len(p["files"]) for p in built.manifest["partitions"])
    print(f"wrote {args.output} ({len(built.image)} bytes, {len(built.manifest['partitions'])} partition(s), "
          f"{nfiles} file(s)); manifest {args.output}.manifest.json")
    return 0


def cmd_list(args) -> int:
    for name in bundled_names():
        print(f"{name:20} {load_bundled(name).summary}")
    return 0


def cmd_describe(args) -> int:
    cfg = load_bundled(args.name)
    print(f"{cfg.name}: {cfg.summary}")
    if cfg.description:
        print()
        print(cfg.description.strip())
    print()
    print("checks: " + ", ".join(a["name"] for a in cfg.assertions))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="envmesim", description="Malicious NVMe drive simulator scenarios.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a scenario file or bundled scenario")
    p.add_argument("config", help="path to a scenario .toml, or a bundled scenario name")
    p.add_argument("--log", help="write the event log as JSON lines")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--report", help="write the run report as JSON")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("build-image", help="build a disk image and its placement manifest")
    p.add_argument("spec", help="image spec .toml (an [image] table or its keys at top level)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_build_image)
    p = sub.add_parser("list", help="list bundled scenarios")
    p.set_defaults(fn=cmd_list)
    p = sub.add_parser("describe", help="show what a bundled scenario does")
    p.add_argument("name")
    p.set_defaults(fn=cmd_describe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, BuildError, tomli.TOMLDecodeError, OSError) as exc:
        print(f"envmesim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
