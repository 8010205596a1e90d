"""Deterministic seed derivation.

All randomness flows through ``np.random.Generator`` instances built from
seeds mixed out of (base_seed, index...) tuples, so any episode or batch can
be regenerated in isolation without replaying a global RNG stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer (public-domain constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(base_seed: int, *indices: int) -> int:
    """Collapse a base seed plus structured indices into one 64-bit seed.

    Mixing is sequential, so mix(s, a, b) != mix(s, b, a) in general and
    distinct index tuples land on effectively independent streams.
    """
    state = _splitmix64(int(base_seed) & _MASK64)
    for idx in indices:
        state = _splitmix64((state ^ (int(idx) & _MASK64)) & _MASK64)
    return state


def rng_for(base_seed: int, *indices: int) -> np.random.Generator:
    """A fresh Generator for the given (base_seed, indices) coordinate."""
    return np.random.default_rng(mix_seed(base_seed, *indices))
