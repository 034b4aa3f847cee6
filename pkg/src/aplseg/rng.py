"""Deterministic, splittable random streams.

Every source of randomness in the project is a named child of one root
seed. Streams are built on the counter-based Philox generator so that the
same (seed, path) pair yields the same sequence on any platform, and
distinct paths never share state.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *path: str | int) -> np.random.Generator:
    """Return the generator for the given label path under ``seed``.

    Labels are hashed into the SeedSequence spawn key, so streams for
    different paths are statistically independent and reproducible.
    """
    key = tuple(
        p if isinstance(p, int) else zlib.crc32(p.encode("utf-8")) for p in path
    )
    seq = np.random.SeedSequence(seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
