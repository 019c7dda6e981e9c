"""Deterministic sub-seed derivation from a single master seed.

Every random draw in a run (weight init, batch shuffling, pixel
permutations, sample selection for memory updates, synthetic data) comes
from a ``numpy.random.Generator`` seeded by :func:`derive_seed`, so one
master seed reproduces the whole experiment and any task boundary can be
re-entered without replaying earlier tasks.

Derivation: the master seed and the UTF-8 bytes of each tag (strings or
integers) are folded into a splitmix64 chain; the final 64-bit state is
the sub-seed.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 step: mix ``state`` into a well-scrambled 64-bit value."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master_seed: int, *tags: str | int) -> int:
    """Derive a 64-bit sub-seed from ``master_seed`` and a tag path.

    Tags name the consumer, e.g. ``derive_seed(s, "shuffle", task, epoch)``.
    Distinct tag paths give statistically independent seeds.
    """
    state = master_seed & _MASK
    for tag in tags:
        data = str(tag).encode("utf-8")
        for byte in data:
            state = splitmix64(state ^ byte)
        state = splitmix64(state ^ len(data))
    return splitmix64(state)


def generator(master_seed: int, *tags: str | int) -> np.random.Generator:
    """A fresh PCG64 generator seeded by ``derive_seed(master_seed, *tags)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, *tags)))
