"""Master-seed expansion into independent per-component streams.

A master seed is stretched with splitmix64; each component mixes in a label
hash (FNV-1a), so adding a new labeled stream never shifts existing ones.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


def derive_seed(master: int, *labels) -> int:
    state = splitmix64(master & _MASK)
    for label in labels:
        state = splitmix64(state ^ fnv1a64(str(label)))
    return state


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))
