"""Tiny deterministic CPU transformer.

Architecture: 2 pre-LN decoder layers, d_model 16, 2 heads of 8, ReLU FFN
with 4x expansion, layer-norm epsilon 1e-5, no biases outside the layer
norms, no final norm, byte vocabulary of 258. Absolute sinusoidal position
encodings are added to the token embedding, indexed by sequence position.
All math is float64.

Weights are procedurally generated so any run can rebuild them exactly: the
i-th scalar parameter is map(splitmix64(seed + i)) with
map(x) = ((x >> 11) / 2^53) * 0.1 - 0.05, enumerating parameters row-major
in this order: embedding; per layer Wq, Wk, Wv, Wo, FFN-in, FFN-out,
ln1 gain, ln1 bias, ln2 gain, ln2 bias; output projection.

KV slot payloads hold the per-layer key and value rows for the token, shape
(layers, 2, d_model), so pages are the only state a later forward needs.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..hashing import MASK64, splitmix64
from .base import Backend, Distribution, VOCAB_SIZE

D_MODEL = 16
N_LAYERS = 2
N_HEADS = 2
D_HEAD = 8
D_FF = 64
LN_EPS = 1e-5
DEFAULT_SEED = 42


def _map_param(x: int) -> float:
    return ((x >> 11) / float(1 << 53)) * 0.1 - 0.05


class _ParamStream:
    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.i = 0

    def take(self, *shape: int) -> np.ndarray:
        n = 1
        for s in shape:
            n *= s
        vals = [_map_param(splitmix64((self.seed + self.i + j) & MASK64)) for j in range(n)]
        self.i += n
        return np.array(vals, dtype=np.float64).reshape(shape)


@lru_cache(maxsize=8192)
def sinusoid(position: int) -> np.ndarray:
    pe = np.empty(D_MODEL, dtype=np.float64)
    for i in range(D_MODEL // 2):
        freq = position / (10000.0 ** (2 * i / D_MODEL))
        pe[2 * i] = math.sin(freq)
        pe[2 * i + 1] = math.cos(freq)
    return pe


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


class ToyTransformer(Backend):
    name = "toy-transformer"

    def __init__(self, arena, *, seed: int = DEFAULT_SEED, **kw):
        super().__init__(arena, **kw)
        self.seed = seed
        ps = _ParamStream(seed)
        self.embedding = ps.take(VOCAB_SIZE, D_MODEL)
        self.layers = []
        for _ in range(N_LAYERS):
            self.layers.append(
                {
                    "wq": ps.take(D_MODEL, D_MODEL),
                    "wk": ps.take(D_MODEL, D_MODEL),
                    "wv": ps.take(D_MODEL, D_MODEL),
                    "wo": ps.take(D_MODEL, D_MODEL),
                    "w1": ps.take(D_MODEL, D_FF),
                    "w2": ps.take(D_FF, D_MODEL),
                    "ln1_g": ps.take(D_MODEL),
                    "ln1_b": ps.take(D_MODEL),
                    "ln2_g": ps.take(D_MODEL),
                    "ln2_b": ps.take(D_MODEL),
                }
            )
        self.w_out = ps.take(D_MODEL, VOCAB_SIZE)
        self.param_count = ps.i

    # ------------------------------------------------------------ hooks

    def input_payload(self, token: int, position: int):
        return self.embedding[token] + sinusoid(position)

    def run_forward(self, ctx, inputs, vis):
        n = len(inputs)
        x = np.stack([cell.payload for cell in inputs]).astype(np.float64, copy=True)
        positions = [cell.position for cell in inputs]
        kv_out = np.zeros((n, N_LAYERS, 2, D_MODEL), dtype=np.float64)

        for li, layer in enumerate(self.layers):
            h = _layernorm(x, layer["ln1_g"], layer["ln1_b"])
            q = h @ layer["wq"]
            k = h @ layer["wk"]
            v = h @ layer["wv"]
            kv_out[:, li, 0, :] = k
            kv_out[:, li, 1, :] = v
            attn = np.empty_like(x)
            for i in range(n):
                cix, jix = vis[i]
                entries = [
                    (ctx[c].position, ctx[c].payload[li, 0], ctx[c].payload[li, 1])
                    for c in cix
                ]
                entries.extend((positions[j], k[j], v[j]) for j in jix)
                entries.append((positions[i], k[i], v[i]))
                entries.sort(key=lambda e: e[0])
                keys = np.stack([e[1] for e in entries])
                vals = np.stack([e[2] for e in entries])
                attn[i] = self._attend(q[i], keys, vals)
            x = x + attn @ layer["wo"]
            h2 = _layernorm(x, layer["ln2_g"], layer["ln2_b"])
            x = x + np.maximum(h2 @ layer["w1"], 0.0) @ layer["w2"]

        payloads = [kv_out[i].copy() for i in range(n)]
        states = [x[i].copy() for i in range(n)]
        return payloads, states

    @staticmethod
    def _attend(q: np.ndarray, keys: np.ndarray, vals: np.ndarray) -> np.ndarray:
        out = np.empty(D_MODEL, dtype=np.float64)
        scale = 1.0 / math.sqrt(D_HEAD)
        for h in range(N_HEADS):
            lo, hi = h * D_HEAD, (h + 1) * D_HEAD
            scores = keys[:, lo:hi] @ q[lo:hi] * scale
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            out[lo:hi] = w @ vals[:, lo:hi]
        return out

    def next_distribution(self, state, k: int) -> Distribution:
        logits = np.asarray(state, dtype=np.float64) @ self.w_out
        logits = logits - logits.max()
        exp = np.exp(logits)
        probs = exp / exp.sum()
        order = sorted(range(VOCAB_SIZE), key=lambda v: (-probs[v], v))
        entries = [(v, float(probs[v])) for v in order[: min(k, VOCAB_SIZE)]]
        return Distribution(entries, k)

    def payload_jsonable(self, payload):
        if isinstance(payload, np.ndarray):
            return payload.tolist()
        return payload
