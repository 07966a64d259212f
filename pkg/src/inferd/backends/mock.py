"""Hash-addressed mock model.

Every next-token distribution is a pure function of the visible token set,
so any observable state can be recomputed offline from page contents alone:

  S   = visible (position, token) pairs sorted by position
  h   = FNV-1a-64 over LE64(position) || LE32(token) per element, in order
  w_v = 1 + (splitmix64(h XOR (v+1)) mod 1023)      for each vocab id v
  p_v = w_v / sum(w)                                 (exact rationals)

The greedy pick is the max-weight token, ties to the smallest id. KV slot
payloads are the raw token ids; output-embed payloads are the frozen visible
set, which makes equality checks across execution strategies exact.
"""
from __future__ import annotations

from fractions import Fraction
from typing import List, Tuple

from ..hashing import hash_token_sequence, splitmix64
from .base import Backend, Distribution, VOCAB_SIZE

WEIGHT_MOD = 1023


def weight_vector(visible: Tuple[Tuple[int, int], ...]) -> List[int]:
    h = hash_token_sequence(visible)
    return [1 + (splitmix64(h ^ (v + 1)) % WEIGHT_MOD) for v in range(VOCAB_SIZE)]


class MockHashModel(Backend):
    name = "mock-hash"

    def input_payload(self, token: int, position: int):
        return token

    def run_forward(self, ctx, inputs, vis):
        tokens = [int(cell.payload) for cell in inputs]
        positions = [cell.position for cell in inputs]
        states = []
        for i, (cix, jix) in enumerate(vis):
            pairs = [(ctx[c].position, int(ctx[c].payload)) for c in cix]
            pairs.extend((positions[j], tokens[j]) for j in jix)
            pairs.append((positions[i], tokens[i]))
            pairs.sort()
            states.append(tuple(pairs))
        return tokens, states

    def next_distribution(self, state, k: int) -> Distribution:
        weights = weight_vector(tuple(state))
        total = sum(weights)
        order = sorted(range(VOCAB_SIZE), key=lambda v: (-weights[v], v))
        entries = [(v, Fraction(weights[v], total)) for v in order[: min(k, VOCAB_SIZE)]]
        return Distribution(entries, k)

    def payload_jsonable(self, payload):
        if isinstance(payload, tuple):
            return [list(p) for p in payload]
        return payload
