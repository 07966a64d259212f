"""Independent reference implementations the tests check the package against.

Everything here is written from the documented math directly, sharing no
code with the package: hashing from the published constants, the mock
model's weights from its formula, rollouts as straight-line loops over
full token prefixes with no paging, queues, or batching involved.
"""
from __future__ import annotations

import math
import struct
from fractions import Fraction
from typing import List, Sequence, Tuple

MASK64 = (1 << 64) - 1

BYTE_TOKENS = 256
BOS = 256
EOS = 257
VOCAB = 258
WEIGHT_MOD = 1023


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def splitmix_float(x: int) -> float:
    return (splitmix64(x) >> 11) / float(1 << 53)


def hash_pairs(pairs: Sequence[Tuple[int, int]]) -> int:
    blob = b"".join(struct.pack("<QI", p, t) for p, t in pairs)
    return fnv1a64(blob)


def mock_weights(pairs: Sequence[Tuple[int, int]]) -> List[int]:
    h = hash_pairs(sorted(pairs))
    return [1 + (splitmix64(h ^ (v + 1)) % WEIGHT_MOD) for v in range(VOCAB)]


def mock_dist(pairs: Sequence[Tuple[int, int]], k: int) -> List[Tuple[int, Fraction]]:
    w = mock_weights(pairs)
    total = sum(w)
    order = sorted(range(VOCAB), key=lambda v: (-w[v], v))
    return [(v, Fraction(w[v], total)) for v in order[:k]]


def mock_greedy_pick(pairs: Sequence[Tuple[int, int]]) -> int:
    w = mock_weights(pairs)
    best = 0
    for v in range(1, VOCAB):
        if w[v] > w[best]:
            best = v
    return best


def tokenize(text) -> List[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids: Sequence[int]) -> bytes:
    return bytes(t for t in ids if t < BYTE_TOKENS)


def greedy_rollout(prompt, n: int, stop_eos: bool = True) -> List[int]:
    """Plain full-context greedy decode on the mock model, no kernel at all."""
    seq = [BOS] + tokenize(prompt)
    out = []
    for _ in range(n):
        pairs = list(enumerate(seq))
        t = mock_greedy_pick(pairs)
        if stop_eos and t == EOS:
            break
        seq.append(t)
        out.append(t)
    return out


def masked_greedy_rollout(prompt, n: int, sink: int, window: int) -> List[int]:
    """Greedy decode where only `sink` oldest plus `window` newest positions
    stay visible; everything in between is masked away before each step."""
    seq = [BOS] + tokenize(prompt)
    out = []
    for _ in range(n):
        pairs = list(enumerate(seq))
        if len(pairs) > sink + window:
            pairs = pairs[:sink] + pairs[len(pairs) - window:]
        t = mock_greedy_pick(pairs)
        if t == EOS:
            break
        seq.append(t)
        out.append(t)
    return out


def beam_oracle(prompt, width: int, steps: int) -> Tuple[float, List[int]]:
    """Full-recomputation beam search over the mock model: every prefix is
    rescored from the whole token sequence, so nothing depends on cached
    state, paging, or forked pages.

    Each live hypothesis expands over the top 8 next tokens, candidates rank
    by summed log prob with ties to the smaller token list, and standard
    pruning keeps `width` of them (width <= 8, so the trim loses nothing).
    Finished hypotheses keep the EOS id and compete with live ones at the
    horizon.
    """
    if width > 8:
        raise ValueError("oracle expands 8 candidates per hypothesis")
    prefix = [BOS] + tokenize(prompt)
    live: List[Tuple[float, List[int]]] = [(0.0, [])]
    done: List[Tuple[float, List[int]]] = []
    for _ in range(steps):
        if not live:
            break
        cands = []
        for score, toks in live:
            pairs = list(enumerate(prefix + toks))
            for v, p in mock_dist(pairs, 8):
                cands.append((score + math.log(float(p)), toks + [v]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, toks in cands[:width]:
            if toks[-1] == EOS:
                done.append((score, toks))
            else:
                live.append((score, toks))
    pool = sorted(done + live, key=lambda c: (-c[0], c[1]))
    return pool[0]


def speculative_greedy(prompt, max_new: int, ngram: int, draft_k: int) -> List[int]:
    """What prompt-lookup decoding must emit: exactly the greedy rollout."""
    return greedy_rollout(prompt, max_new)
