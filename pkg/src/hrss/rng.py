"""Seeded random streams.

Every consumer (a module, a test fixture, a CLI command) asks for a stream by
name.  The name is folded into the user seed with FNV-1a and then whitened by
splitmix64, so streams are reproducible and independent of the order in which
they are requested.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


def derive_seed(seed: int, name: str = "") -> int:
    _, out = splitmix64((int(seed) & _MASK) ^ _fnv1a(name))
    return out


def stream(seed: int, name: str = "") -> np.random.Generator:
    """A numpy Generator for the named stream under ``seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, name)))
