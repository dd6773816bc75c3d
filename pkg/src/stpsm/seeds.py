"""Deterministic seed fan-out from a single master seed (splitmix64)."""
from __future__ import annotations

import zlib

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *labels) -> int:
    """Child seed for a named stage, e.g. ``derive_seed(7, "eval", "fold", 2)``.

    Each label is folded in with a CRC32 of its text followed by a splitmix64
    round, so seeds do not depend on Python's randomized ``hash``.
    """
    state = int(master) & _MASK
    for label in labels:
        state = splitmix64(state ^ zlib.crc32(str(label).encode()))
    return splitmix64(state) >> 1  # keep it a positive int63 for numpy
