"""Backend contract shared by every model implementation.

A backend owns nothing but compute: it reads and writes the arena (the
inference layer's actual page/embed storage) when the control layer hands it
a batch of resolved calls. Calls arrive with physical ids and explicit okv
slot targets, so execution is pure mechanism; all policy and validation
happened upstream.

Attention visibility contract (both models):
  - with no explicit mask, an input token at position p sees every unmasked
    context slot with position <= p, every earlier in-call token, and itself
  - with an explicit mask, row i selects context columns (the unmasked ikv
    slots in page order, then slot order) followed by the in-call columns;
    the token itself is always visible regardless of its own column
  - visible entries are processed in ascending position order, which keeps
    chunked prefills numerically identical to monolithic ones
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

from ..errors import (
    InvalidArgument,
    LengthMismatch,
    MaskShapeMismatch,
    RangeMismatch,
    UnknownTokenId,
)
from ..resources import Embed, KvPage, TokenSlot

# byte-level vocabulary shared by all bundled models
BYTE_TOKENS = 256
BOS = 256
EOS = 257
VOCAB_SIZE = 258

TRAIT_ALLOCATE = "Allocate"
TRAIT_FORWARD = "Forward"
TRAIT_INPUT_TEXT = "InputText"
TRAIT_OUTPUT_TEXT = "OutputText"
TRAIT_TOKENIZE = "Tokenize"

ALL_TRAITS = (
    TRAIT_ALLOCATE,
    TRAIT_FORWARD,
    TRAIT_INPUT_TEXT,
    TRAIT_OUTPUT_TEXT,
    TRAIT_TOKENIZE,
)

# supertrait requirements: declaring the key implies the values
TRAIT_IMPLIES = {
    TRAIT_INPUT_TEXT: (TRAIT_ALLOCATE, TRAIT_FORWARD),
    TRAIT_TOKENIZE: (TRAIT_INPUT_TEXT,),
    TRAIT_OUTPUT_TEXT: (TRAIT_ALLOCATE,),
}

# trait gating each queued call type
OP_TRAIT = {
    "alloc_kvpage": TRAIT_ALLOCATE,
    "dealloc_kvpage": TRAIT_ALLOCATE,
    "alloc_emb": TRAIT_ALLOCATE,
    "dealloc_emb": TRAIT_ALLOCATE,
    "forward": TRAIT_FORWARD,
    "mask_kvpage": TRAIT_FORWARD,
    "copy_kvpage": TRAIT_FORWARD,
    "embed_txt": TRAIT_INPUT_TEXT,
    "get_next_dist": TRAIT_OUTPUT_TEXT,
    "tokenize": TRAIT_TOKENIZE,
    "detokenize": TRAIT_TOKENIZE,
    "get_vocabs": TRAIT_TOKENIZE,
}


def trait_closure(traits: Sequence[str]) -> frozenset:
    out = set(traits)
    changed = True
    while changed:
        changed = False
        for t in list(out):
            for req in TRAIT_IMPLIES.get(t, ()):
                if req not in out:
                    out.add(req)
                    changed = True
    return frozenset(out)


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    traits: frozenset
    vocab_size: int
    max_batch_tokens: int

    def to_jsonable(self) -> dict:
        return {
            "name": self.name,
            "traits": sorted(self.traits),
            "vocab_size": self.vocab_size,
            "max_batch_tokens": self.max_batch_tokens,
        }


Prob = Union[Fraction, float]


@dataclass
class Distribution:
    """Next-token distribution truncated to the top k entries.

    Entries are (token id, probability) sorted by descending probability,
    ties broken by ascending id, so entries[0] is always the greedy pick.
    """

    entries: List[Tuple[int, Prob]]
    k: int

    def argmax(self) -> int:
        return self.entries[0][0]

    def to_wire(self) -> dict:
        ids = [t for t, _ in self.entries]
        if self.entries and isinstance(self.entries[0][1], Fraction):
            probs = [[p.numerator, p.denominator] for _, p in self.entries]
            kind = "rational"
        else:
            probs = [float(p) for _, p in self.entries]
            kind = "float"
        return {"ids": ids, "probs": probs, "kind": kind, "k": self.k}

    @staticmethod
    def from_wire(raw: dict) -> "Distribution":
        if raw["kind"] == "rational":
            probs = [Fraction(n, d) for n, d in raw["probs"]]
        else:
            probs = list(raw["probs"])
        return Distribution(list(zip(raw["ids"], probs)), raw["k"])


class ByteTokenizer:
    """Identity byte tokenizer: token id = byte value, plus BOS/EOS specials."""

    vocab_size = VOCAB_SIZE

    def tokenize(self, data: bytes) -> List[int]:
        return list(data)

    def detokenize(self, ids: Sequence[int]) -> bytes:
        out = bytearray()
        for t in ids:
            if not 0 <= t < VOCAB_SIZE:
                raise UnknownTokenId(f"token id {t} outside vocabulary")
            if t < BYTE_TOKENS:
                out.append(t)
            # specials render as empty bytes
        return bytes(out)

    def vocab(self) -> List[bytes]:
        return [bytes([i]) for i in range(BYTE_TOKENS)] + [b"", b""]


class Arena:
    """Physical storage for page and embed contents, keyed by physical id."""

    def __init__(self):
        self.pages: Dict[int, KvPage] = {}
        self.embs: Dict[int, Embed] = {}


class Backend:
    """One model bound to an arena; executes resolved calls serially."""

    name = "backend"
    default_traits = (TRAIT_TOKENIZE, TRAIT_OUTPUT_TEXT)

    def __init__(self, arena: Arena, *, traits: Optional[Sequence[str]] = None,
                 max_batch_tokens: int = 1 << 16):
        self.arena = arena
        self.tokenizer = ByteTokenizer()
        declared = tuple(traits) if traits is not None else self.default_traits
        for t in declared:
            if t not in ALL_TRAITS:
                raise InvalidArgument(f"unknown trait {t!r}")
        self.descriptor = ModelDescriptor(
            name=self.name,
            traits=trait_closure(declared),
            vocab_size=self.tokenizer.vocab_size,
            max_batch_tokens=max_batch_tokens,
        )

    # ---------------------------------------------------------- dispatch

    def execute(self, ctype: str, args: dict):
        handler = getattr(self, "_op_" + ctype, None)
        if handler is None:
            raise InvalidArgument(f"backend cannot execute {ctype!r}")
        return handler(args)

    # ----------------------------------------------- storage management

    def _op_alloc_kvpage(self, args):
        cap = args["capacity"]
        for pid in args["pages"]:
            self.arena.pages[pid] = KvPage(capacity=cap)
        return None

    def _op_dealloc_kvpage(self, args):
        for pid in args["pages"]:
            self.arena.pages.pop(pid, None)
        return None

    def _op_alloc_emb(self, args):
        for eid in args["embs"]:
            self.arena.embs[eid] = Embed()
        return None

    def _op_dealloc_emb(self, args):
        for eid in args["embs"]:
            self.arena.embs.pop(eid, None)
        return None

    def _op_copy_kvpage(self, args):
        src = self.arena.pages[args["src"]]
        dst = self.arena.pages[args["dst"]]
        s0, d0, n = args["src_start"], args["dst_start"], args["n"]
        if s0 < 0 or d0 < 0 or n < 0 or s0 + n > src.fill:
            raise RangeMismatch("source range not filled")
        if d0 > dst.fill or d0 + n > dst.capacity:
            raise RangeMismatch("destination range not dense or beyond capacity")
        for i in range(n):
            cell = src.slots[s0 + i].clone()
            if d0 + i < dst.fill:
                dst.slots[d0 + i] = cell
            else:
                dst.slots.append(cell)
        return None

    def _op_mask_kvpage(self, args):
        page = self.arena.pages[args["page"]]
        mask = args["mask"]
        if len(mask) != page.fill:
            raise LengthMismatch(f"mask length {len(mask)} != fill {page.fill}")
        for slot, m in zip(page.slots, mask):
            slot.masked = bool(m)
        return None

    # -------------------------------------------------------- tokenizer

    def _op_tokenize(self, args):
        from ..frames import b64d

        return self.tokenizer.tokenize(b64d(args["text_b64"]))

    def _op_detokenize(self, args):
        from ..frames import b64e

        return b64e(self.tokenizer.detokenize(args["ids"]))

    def _op_get_vocabs(self, args):
        from ..frames import b64e

        return [b64e(v) for v in self.tokenizer.vocab()]

    # ------------------------------------------------------- inference

    def _op_embed_txt(self, args):
        tokens = args["tokens"]
        positions = args["positions"]
        embs = args["embs"]
        if not (len(tokens) == len(positions) == len(embs)):
            raise LengthMismatch("tokens, positions, embs must align")
        for t in tokens:
            if not 0 <= t < self.tokenizer.vocab_size:
                raise UnknownTokenId(f"token id {t} outside vocabulary")
        for t, p, eid in zip(tokens, positions, embs):
            cell = self.arena.embs[eid]
            cell.filled = True
            cell.kind = "input"
            cell.position = p
            cell.payload = self.input_payload(t, p)
        return None

    def _op_forward(self, args):
        ikv: List[int] = args["ikv"]
        iemb: List[int] = args["iemb"]
        okv_slots: List[Tuple[int, int]] = [tuple(x) for x in args["okv_slots"]]
        oemb: List[int] = args["oemb"]
        mask = args.get("mask")

        ctx: List[TokenSlot] = []
        for pid in ikv:
            for slot in self.arena.pages[pid].slots:
                if not slot.masked:
                    ctx.append(slot)
        inputs = [self.arena.embs[eid] for eid in iemb]
        positions = [cell.position for cell in inputs]
        n, m = len(inputs), len(ctx)

        vis: List[Tuple[List[int], List[int]]] = []
        if mask is None:
            for i, p in enumerate(positions):
                cix = [c for c in range(m) if ctx[c].position <= p]
                vis.append((cix, list(range(i))))
        else:
            if len(mask) != n:
                raise MaskShapeMismatch(f"{len(mask)} mask rows for {n} inputs")
            for i in range(n):
                row = mask[i]
                if len(row) != m + n:
                    raise MaskShapeMismatch(
                        f"mask row {i} has {len(row)} columns, expected {m + n}"
                    )
                cix = [c for c in range(m) if row[c]]
                jix = [j for j in range(n) if j != i and row[m + j]]
                vis.append((cix, jix))

        slot_payloads, states = self.run_forward(ctx, inputs, vis)

        for (pid, idx), payload, pos in zip(okv_slots, slot_payloads, positions):
            page = self.arena.pages[pid]
            if idx != page.fill:
                raise RangeMismatch(f"okv slot {idx} breaks dense fill at {page.fill}")
            page.slots.append(TokenSlot(position=pos, payload=payload))

        base = n - len(oemb)
        for j, eid in enumerate(oemb):
            cell = self.arena.embs[eid]
            cell.filled = True
            cell.kind = "output"
            cell.position = positions[base + j]
            cell.payload = states[base + j]
        return None

    def _op_get_next_dist(self, args):
        cell = self.arena.embs[args["emb"]]
        dist = self.next_distribution(cell.payload, args["k"])
        return dist.to_wire()

    # ----------------------------------------------------- model hooks

    def input_payload(self, token: int, position: int):
        """Payload stored in an embed by embed_txt."""
        raise NotImplementedError

    def run_forward(self, ctx, inputs, vis):
        """Return (per-input okv payloads, per-input output states)."""
        raise NotImplementedError

    def next_distribution(self, state, k: int) -> Distribution:
        """Full distribution from an output state, truncated to k."""
        raise NotImplementedError

    # -------------------------------------------------- introspection

    def dump_page(self, pid: int) -> dict:
        page = self.arena.pages[pid]
        return {
            "capacity": page.capacity,
            "slots": [
                {"position": s.position, "masked": s.masked, "payload": self.payload_jsonable(s.payload)}
                for s in page.slots
            ],
        }

    def dump_emb(self, eid: int) -> dict:
        cell = self.arena.embs[eid]
        return {
            "filled": cell.filled,
            "kind": cell.kind,
            "position": cell.position,
            "payload": self.payload_jsonable(cell.payload),
        }

    def payload_jsonable(self, payload):
        return payload
