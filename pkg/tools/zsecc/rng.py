"""Seeded, splittable, counter-based random streams.

Every random draw in zsecc comes from numpy's Philox-4x64 generator keyed by a
SeedSequence. Derived streams use spawn keys (``stream(seed, "train", 3)``), so
two purposes sharing a base seed never see overlapping counters.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part) & 0xFFFFFFFF


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Philox generator for ``seed`` and a named sub-stream ``path``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_word(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
