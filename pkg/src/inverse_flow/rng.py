"""Named, order-independent random streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *names: str) -> np.random.Generator:
    """Generator keyed by ``(seed, names...)``.

    Each name is hashed with CRC32 into the SeedSequence spawn key, so adding
    a new consumer never shifts the draws of an existing one.
    """
    key = tuple(zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
