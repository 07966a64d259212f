"""Deterministic integer hashing primitives used by the mock backend and samplers.

Both functions are pure and operate on unsigned 64-bit values, so every
consumer (serving path, test oracles, seeded samplers) can recompute results
from first principles.
"""
from __future__ import annotations

import struct
from typing import Iterable, Tuple

MASK64 = (1 << 64) - 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """FNV-1a over a byte string, 64-bit variant."""
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64(x: int) -> int:
    """One output of the splitmix64 generator seeded at ``x``.

    Used as a stateless hash finalizer: includes the golden-ratio increment,
    then the standard two-multiply avalanche.
    """
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def hash_token_sequence(pairs: Iterable[Tuple[int, int]]) -> int:
    """FNV-1a-64 over little-endian (u64 position, u32 token) records in order."""
    buf = b"".join(struct.pack("<QI", p, t) for p, t in pairs)
    return fnv1a64(buf)


class SplitMixStream:
    """Deterministic u64 stream: the splitmix64 generator advanced from a seed."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        # 53 high bits, uniform in [0, 1)
        return (self.next_u64() >> 11) / float(1 << 53)
