"""Deterministic counter-based random streams.

Every draw in the toolkit comes from a Philox stream keyed by
``(seed, purpose tag, *indices)``, so results do not depend on generation
order or thread schedule: the stream for path 17 at epoch 3 is the same
whether it is drawn first, last, or concurrently with others.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 63) - 1


def stream(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Independent generator for the key tuple (seed, tag, *indices)."""
    entropy = (
        int(seed) & _MASK,
        zlib.crc32(tag.encode("utf-8")),
        *(int(i) & _MASK for i in indices),
    )
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def rademacher(gen: np.random.Generator, size) -> np.ndarray:
    """+/-1 entries, equiprobable."""
    return np.where(gen.random(size) < 0.5, -1.0, 1.0)
