"""Named, reproducible RNG substreams.

All randomness in a run flows from one root seed. Stages ask for a stream by
name ("split", "model:mlp", "restart:17", ...) so the draw order of one stage
can never disturb another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def stream_seed(root_seed: int, *keys) -> list[int]:
    """Entropy list identifying the substream (root seed, then hashed keys)."""
    return [int(root_seed)] + [_key_to_int(k) for k in keys]


def substream(root_seed: int, *keys) -> np.random.Generator:
    """A generator seeded deterministically by (root_seed, *keys)."""
    return np.random.default_rng(stream_seed(root_seed, *keys))
