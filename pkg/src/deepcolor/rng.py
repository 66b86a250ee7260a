"""Seedable, splittable random streams.

All randomness goes through Philox-4x64 (a counter-based generator) keyed by
``numpy.random.SeedSequence(seed, spawn_key=...)``. A stream is named by a
tuple of tags; string tags are mapped to integers with CRC-32 so the key is
stable across processes and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(t) -> int:
    if isinstance(t, (int, np.integer)):
        if t < 0:
            raise ValueError(f"stream tags must be non-negative, got {t}")
        return int(t)
    return zlib.crc32(str(t).encode("utf-8"))


def make_rng(seed: int, *tags) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_tag(t) for t in tags))
    return np.random.Generator(np.random.Philox(ss))


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state
