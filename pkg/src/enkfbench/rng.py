"""Counter-based random streams keyed by tuples of ints and tags.

Every random draw in the package goes through :func:`stream`, so results never
depend on call order or worker scheduling: the key alone fixes the numbers.
"""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "tag"]


def tag(name: str) -> int:
    """Stable 32-bit integer for a purpose tag."""
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *key: int | str) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *key)``.

    String components are hashed with :func:`tag`; integers are used as-is.
    Two different keys give statistically independent streams.
    """
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = tuple(tag(k) if isinstance(k, str) else int(k) for k in key)
    if any(k < 0 for k in spawn_key):
        raise ValueError(f"stream key components must be non-negative: {key!r}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))
