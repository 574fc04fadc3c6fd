"""Configuration, seeding, experiment runner and command-line entry point."""

from .checks import ALL_CHECKS, CHECKS_BY_KIND, CheckResult, Condition, run_check
from .config import ExperimentConfig, default_config, load_config, load_config_file
from .runner import RunManifest, run, verify_manifest
from .seeding import component_rng, component_seed, resolve_seed

__all__ = [
    "ALL_CHECKS",
    "CHECKS_BY_KIND",
    "CheckResult",
    "Condition",
    "ExperimentConfig",
    "RunManifest",
    "component_rng",
    "component_seed",
    "default_config",
    "load_config",
    "load_config_file",
    "resolve_seed",
    "run",
    "run_check",
    "verify_manifest",
]
