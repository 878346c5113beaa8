"""Scenario plumbing: disk image fixtures, config files, the runner and the CLI."""

from .assertions import AssertionResult, evaluate
from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .imagebuilder import BuildError, BuiltImage, FileSpec, ImageSpec, PartitionSpec, boot_trace, build_image
from .runner import RunReport, run_scenario

__all__ = [
    "AssertionResult", "BuildError", "BuiltImage", "ConfigError", "FileSpec", "ImageSpec", "PartitionSpec",
    "RunReport", "ScenarioConfig", "boot_trace", "build_image", "evaluate", "load_config", "parse_config",
    "run_scenario",
]
