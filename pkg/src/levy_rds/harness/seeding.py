"""Per-component random streams derived from one master seed.

The component name is hashed with CRC-32 and used as the spawn key of a
``SeedSequence`` rooted at the master seed, so adding a component never
changes the stream of another one.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

from .._validation import ConfigError

ENV_SEED = "LEVY_RDS_SEED"


def stream_index(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def component_sequence(master: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(stream_index(name),))


def component_seed(master: int, name: str) -> int:
    """A 32-bit integer seed for ``name`` (for APIs that take plain ints)."""
    return int(component_sequence(master, name).generate_state(1, dtype=np.uint32)[0])


def component_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(component_sequence(master, name))


def resolve_seed(config_seed: int, cli_seed: int | None = None) -> int:
    """``--seed`` beats ``LEVY_RDS_SEED`` which beats the config value."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(ENV_SEED)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{ENV_SEED}={env!r} is not an integer") from None
    return int(config_seed)
