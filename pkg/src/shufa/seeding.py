"""Deterministic seed derivation.

Every randomized operation in the toolkit derives its own stream from
(global seed, string/int tags), so generation order never changes results
and independent items can run in parallel.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"seed tag must be int or str, got {type(tag).__name__}")


def seed_sequence(seed: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed)] + [_tag_to_int(t) for t in tags])


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent numpy generator for (seed, tags)."""
    return np.random.default_rng(seed_sequence(seed, *tags))


def derive_int(seed: int, *tags) -> int:
    """63-bit integer seed for libraries that take a single int (torch)."""
    state = seed_sequence(seed, *tags).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)
