import logging
import os

import numpy as np
from dotenv import load_dotenv

from stein_select.errors import ConfigError

load_dotenv()

LOG_LEVEL = os.getenv("STEIN_SELECT_LOG_LEVEL", "INFO")
RNG_ALGORITHM = os.getenv("STEIN_SELECT_RNG", "PCG64")

SUPPORTED_RNG = ("PCG64",)


def _int_setting(name: str, default: str) -> int:
    raw = os.getenv(name, default)
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"The {name} environment variable must be an integer, got {raw!r}")


N_JOBS = _int_setting("STEIN_SELECT_N_JOBS", "1")        # joblib workers for seed/draw maps
BLOCK_ROWS = _int_setting("STEIN_SELECT_BLOCK_ROWS", "0")  # 0 picks rows from the memory target

# Upper bound on floats held by one (rows, n, d) block of pairwise terms.
BLOCK_ELEMENTS = 2_000_000

if RNG_ALGORITHM not in SUPPORTED_RNG:
    raise ConfigError(
        f"STEIN_SELECT_RNG={RNG_ALGORITHM!r} is not supported; use one of {SUPPORTED_RNG}"
    )


def configure_logging(level: str | None = None) -> None:
    """Set up root logging once; only the CLI calls this."""
    name = (level or LOG_LEVEL).upper()
    numeric = getattr(logging, name, None)
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level {name!r}")
    logging.basicConfig(
        level=numeric,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def make_rng(seed) -> np.random.Generator:
    """Seeded generator using the configured bit generator."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seed sequences for parallel draws."""
    return np.random.SeedSequence(seed).spawn(count)
