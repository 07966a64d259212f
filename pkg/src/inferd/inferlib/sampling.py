"""Token pickers over wire distributions.

Samplers are pure and own their randomness: a seeded splitmix stream drawn
once per pick, so a transcript replays exactly given the same seed
regardless of batching or scheduling.
"""
from __future__ import annotations

from ..backends.base import Distribution
from ..errors import InvalidArgument
from ..hashing import SplitMixStream


class GreedySampler:
    """Deterministic argmax; ties already resolved to the smallest id."""

    wants_k = 1

    def pick(self, dist: Distribution, step: int) -> int:
        return dist.argmax()


class TopKSampler:
    def __init__(self, k: int, temperature: float = 1.0, seed: int = 0):
        if k < 1:
            raise InvalidArgument("top-k sampler needs k >= 1")
        if temperature <= 0.0:
            raise InvalidArgument("temperature must be positive")
        self.k = k
        self.wants_k = k
        self.temperature = temperature
        self.seed = seed
        self._stream = SplitMixStream(seed)

    def pick(self, dist: Distribution, step: int) -> int:
        top = dist.entries[: self.k]
        weights = [float(p) ** (1.0 / self.temperature) for _, p in top]
        total = sum(weights)
        u = self._stream.next_float() * total
        acc = 0.0
        for (token, _), w in zip(top, weights):
            acc += w
            if u < acc:
                return token
        return top[-1][0]
