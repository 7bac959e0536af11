"""Deterministic seed derivation for parallel-safe Monte-Carlo sampling.

Substream seeds are derived from a master seed and one or more integer
indices with a fixed SplitMix64 chain:

    h = splitmix64(master)
    for each index i:  h = splitmix64(h XOR splitmix64(i + GAMMA))

The derived 64-bit values key a counter-based Philox bit generator, so any
(master_seed, index...) pair maps to the same stream on every platform and
in any execution order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15  # golden-ratio increment used by SplitMix64


def splitmix64(x: int) -> int:
    """One SplitMix64 output step for a 64-bit input."""
    x = (x + _GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_key(master_seed: int, *indices: int) -> int:
    """Mix a master seed and substream indices into a 64-bit key."""
    h = splitmix64(master_seed & _MASK64)
    for i in indices:
        h = splitmix64(h ^ splitmix64((i & _MASK64) ^ _GAMMA))
    return h


def substream(master_seed: int, *indices: int) -> np.random.Generator:
    """Independent Generator for the given (master_seed, indices) tuple.

    The Philox key is the 128-bit concatenation of ``derive_key(...)`` and
    ``splitmix64(derive_key(...))``; the mapping is fixed by this module and
    is part of the reproducibility contract.
    """
    k = derive_key(master_seed, *indices)
    key = np.array([k, splitmix64(k)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
