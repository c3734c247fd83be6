"""Reproducible random-number streams.

All randomness in the package flows from one user seed through named,
independent streams of the counter-based Philox generator:

    stream(seed, "dgp", "continuous", rep)   # simulator draws
    stream(seed, "folds", s)                 # cross-fitting partitions
    stream(seed, "bootstrap", b)             # bootstrap resampling

String keys are hashed stably (CRC-32) and combined with the seed into a
``SeedSequence``, so streams are independent, order-insensitive to runtime
interleaving, and identical across platforms and process boundaries.
"""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream"]


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be nonnegative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Return an independent Philox generator for (seed, *keys)."""
    # The key count is part of the entropy: SeedSequence zero-pads its
    # entropy words, so (k,) and (k, 0) would otherwise alias.
    entropy = (int(seed), len(keys)) + tuple(_key_to_int(k) for k in keys)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
