"""Named random sub-streams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode())


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for (seed, name, ...); same inputs, same stream."""
    return np.random.default_rng([_key(seed)] + [_key(n) for n in names])
