"""Keyed 64-bit avalanche hashing.

Every pseudorandom decision of the watermark schemes goes through these
functions so that partitions and g-values are reproducible bit for bit in
any language: a splitmix64 finalizer chained over (key, purpose tag, token
window), then applied once more per candidate token id.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

TAG_GREEN = 0x01
TAG_TOURNAMENT = 0x100  # layer j uses TAG_TOURNAMENT + j


def mix64(x: int) -> int:
    x &= MASK64
    x ^= x >> 30
    x = (x * _M1) & MASK64
    x ^= x >> 27
    x = (x * _M2) & MASK64
    x ^= x >> 31
    return x


def mix64_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x ^ (x >> np.uint64(30))
        x = x * np.uint64(_M1)
        x = x ^ (x >> np.uint64(27))
        x = x * np.uint64(_M2)
        x = x ^ (x >> np.uint64(31))
    return x


def context_seed(key: int, tag: int, window: Iterable[int]) -> int:
    """Chain ``mix64`` over the key, a purpose tag and a token window."""
    h = mix64((key & MASK64) ^ ((tag * GOLDEN) & MASK64))
    for tok in window:
        h = mix64(h ^ ((int(tok) + GOLDEN) & MASK64))
    return h


def token_hashes(seed: int, token_ids: np.ndarray) -> np.ndarray:
    """Per-token hash values under a context seed (vectorized)."""
    ids = np.asarray(token_ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64_array(np.uint64(seed) ^ (ids + np.uint64(GOLDEN)))
