"""Experiment configuration: a small TOML dialect with a closed key set."""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .._validation import ConfigError

KINDS = ("simulate-levy", "ito-conjugacy", "marcus-conjugacy", "attractor", "linearize", "verify-all")
SYSTEMS = ("linear-1d", "affine-marcus", "duffing-van-der-pol", "scalar-hartman", "custom")

# section -> key -> (type tag, default); the defaults reproduce the acceptance setups
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "experiment": {
        "kind": ("kind", "verify-all"),
        "seed": ("int", 0),
        "output": ("str", "levy-rds-out"),
        "workers": ("posint", 1),
    },
    "triplet": {
        "dim": ("posint", 1),
        "drift": ("vector", [0.1]),
        "diffusion": ("matrix", [[0.4]]),
        "jump_rate": ("nonneg", 2.0),
        "jump_law": ("table", {"kind": "uniform-ball", "radius": 0.4, "dim": 1}),
        "small_jump_cutoff": ("pos", 0.5),
        "compensate_small": ("bool", False),
    },
    "system": {
        "name": ("system", "linear-1d"),
        "B0": ("matrix", [[-0.5]]),
        "B": ("tensor", [[[1.0]]]),
        "offsets": ("matrix", [[0.0]]),
        "gamma1": ("float", 1.0),
        "gamma2": ("float", 1.0),
        "sigma1": ("float", 0.5),
        "sigma2": ("float", 0.5),
        "alpha": ("float", -0.5),
        "sigma": ("float", 0.4),
        "l": ("posint", 3),
        "k1_constant": ("pos", 1.0),
    },
    "numerics": {
        "dt": ("pos", 1e-3),
        "dt_ladder": ("posvector", [4e-3, 2e-3, 1e-3]),
        "step2_ladder": ("posvector", [4e-3, 2e-3, 1e-3, 5e-4]),
        "base_step": ("pos", 2.5e-4),
        "horizon": ("vector", [-25.0, 3.0]),
        "t_end": ("pos", 1.0),
        "tail_horizon": ("pos", 20.0),
        "mu": ("pos", 1.0),
        "x0": ("vector", [0.7]),
        "anchors": ("lattice", [-0.5, 0.0, 0.5]),
        "tol": ("pos", 1e-2),
        "n_paths": ("posint", 8),
        "n_points": ("posint", 256),
        "n_samples": ("posint", 100),
        "lyapunov_horizon": ("pos", 200.0),
        "lyapunov_dt": ("pos", 1e-2),
        "ball_radius": ("pos", 5.0),
        "pullback_times": ("posvector", [2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0]),
        "invariance_time": ("pos", 1.0),
        "annulus": ("posvector", [5.0, 50.0]),
    },
}


@dataclass
class ExperimentConfig:
    """Parsed configuration; ``sections`` holds every key with defaults filled in."""

    sections: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.sections["experiment"]["kind"]

    @property
    def seed(self) -> int:
        return self.sections["experiment"]["seed"]

    @property
    def output(self) -> str:
        return self.sections["experiment"]["output"]

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def replace(self, **experiment) -> "ExperimentConfig":
        """Copy with keys of the ``[experiment]`` section overridden."""
        new = copy.deepcopy(self.sections)
        for k, v in experiment.items():
            if v is not None:
                new["experiment"][k] = _coerce("experiment", k, SCHEMA["experiment"][k][0], v)
        return ExperimentConfig(new)

    def echo(self) -> dict:
        return copy.deepcopy(self.sections)


def _fail(section: str, key: str, msg: str):
    raise ConfigError(f"[{section}] {key}: {msg}")


def _num(section, key, v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(section, key, f"expected a number, got {type(v).__name__}")
    return float(v)


def _coerce(section: str, key: str, tag: str, v):
    if tag == "kind":
        if v not in KINDS:
            _fail(section, key, f"unknown experiment kind {v!r}; expected one of {', '.join(KINDS)}")
        return v
    if tag == "system":
        if v not in SYSTEMS:
            _fail(section, key, f"unknown system {v!r}; expected one of {', '.join(SYSTEMS)}")
        return v
    if tag == "str":
        if not isinstance(v, str):
            _fail(section, key, "expected a string")
        return v
    if tag == "bool":
        if not isinstance(v, bool):
            _fail(section, key, "expected true or false")
        return v
    if tag in ("int", "posint"):
        if isinstance(v, bool) or not isinstance(v, int):
            _fail(section, key, "expected an integer")
        if tag == "posint" and v <= 0:
            _fail(section, key, "must be positive")
        return int(v)
    if tag in ("float", "pos", "nonneg"):
        x = _num(section, key, v)
        if tag == "pos" and not x > 0:
            _fail(section, key, "must be positive")
        if tag == "nonneg" and x < 0:
            _fail(section, key, "must be non-negative")
        return x
    if tag in ("vector", "posvector", "lattice"):
        if not isinstance(v, list) or not v:
            _fail(section, key, "expected a non-empty array")
        xs = [_num(section, key, e) for e in v]
        if tag == "posvector" and any(x <= 0 for x in xs):
            _fail(section, key, "entries must be positive")
        if tag == "lattice":
            xs = sorted(set(xs))
        return xs
    if tag == "matrix":
        if not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v):
            _fail(section, key, "expected an array of arrays")
        return [[_num(section, key, e) for e in r] for r in v]
    if tag == "tensor":
        if not isinstance(v, list) or not all(isinstance(r, list) for r in v):
            _fail(section, key, "expected a nested array of depth 3")
        return [_coerce(section, key, "matrix", r) for r in v]
    if tag == "table":
        if not isinstance(v, dict):
            _fail(section, key, "expected an inline table")
        return dict(v)
    raise AssertionError(tag)


def load_config(text: str) -> ExperimentConfig:
    """Parse configuration text; unknown sections or keys are errors."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {exc}") from exc
    sections = {name: {k: copy.deepcopy(d) for k, (_, d) in keys.items()} for name, keys in SCHEMA.items()}
    for name, body in raw.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected a section")
        for key, value in body.items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {key!r} in section [{name}]")
            sections[name][key] = _coerce(name, key, SCHEMA[name][key][0], value)
    cfg = ExperimentConfig(sections)
    _cross_check(cfg)
    return cfg


def load_config_file(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return load_config(fh.read())


def default_config(kind: str = "verify-all", seed: int = 0) -> ExperimentConfig:
    return load_config(f'[experiment]\nkind = "{kind}"\nseed = {int(seed)}\n')


def _cross_check(cfg: ExperimentConfig):
    h = cfg["numerics"]["horizon"]
    if len(h) != 2 or not h[0] <= 0.0 <= h[1]:
        raise ConfigError("[numerics] horizon: expected [t_min, t_max] containing 0")
    a = cfg["numerics"]["annulus"]
    if len(a) != 2 or a[0] >= a[1]:
        raise ConfigError("[numerics] annulus: expected [R_min, R_max] with R_min < R_max")
    pt = cfg["numerics"]["pullback_times"]
    if any(b <= a for a, b in zip(pt, pt[1:])):
        raise ConfigError("[numerics] pullback_times: must be increasing")
    tri = cfg["triplet"]
    if len(tri["drift"]) != tri["dim"] or len(tri["diffusion"]) != tri["dim"]:
        raise ConfigError("[triplet] drift/diffusion: sizes do not match dim")
