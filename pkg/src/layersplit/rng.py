"""Seeded random-number substreams.

All randomness in the project flows from a single integer seed; each
subsystem draws from a named substream so modules stay independently
reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream"]


def substream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for (seed, name)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
