"""Bundled inferlets.

Each builtin is an `async def main(api)` registered in BUILTINS. They are
ordinary programs with no private kernel access; everything they do goes
through the same host API uploaded programs get, so they double as living
documentation of the patterns: streamed completion, prefix reuse through the
export registry, beam forking, prompt-lookup speculation, visibility-window
masking, and tool calls overlapped with generation.

Arguments arrive as a flat string list: positionals first, then --key value
pairs (--flag alone means true).
"""
from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

from ..backends.base import BOS, EOS
from ..errors import InvalidArgument, NameNotFound
from .context import Context
from .sampling import GreedySampler, TopKSampler


def _opts(argv: List[str]) -> Tuple[List[str], Dict[str, object]]:
    pos: List[str] = []
    opt: Dict[str, object] = {}
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--"):
            key = a[2:].replace("-", "_")
            if i + 1 < len(argv) and not str(argv[i + 1]).startswith("--"):
                opt[key] = argv[i + 1]
                i += 2
            else:
                opt[key] = True
                i += 1
        else:
            pos.append(a)
            i += 1
    return pos, opt


def _sampler(opt: Dict[str, object]):
    kind = str(opt.get("sampler", "greedy"))
    if kind == "greedy":
        return GreedySampler()
    if kind == "topk":
        return TopKSampler(int(opt.get("k", 8)),
                           float(opt.get("temperature", 1.0)),
                           int(opt.get("seed", 0)))
    raise InvalidArgument(f"unknown sampler {kind!r}")


def _need(pos: List[str], n: int, usage: str) -> None:
    if len(pos) < n:
        raise InvalidArgument(f"usage: {usage}")


# --------------------------------------------------------------- completion


async def text_completion(api):
    pos, opt = _opts(api.get_args())
    prompt = opt.get("prompt")
    if prompt is None:
        _need(pos, 1, "text_completion <prompt> [--max-tokens N] [--sampler greedy|topk]")
        prompt = pos[0]
    ctx = Context(api, opt.get("model"))
    await ctx.fill(str(prompt))
    toks, _ = await ctx.generate(
        _sampler(opt), int(opt.get("max_tokens", 32)),
        stop_text=opt.get("stop"), stream=True)
    ctx.close()
    return f"generated {len(toks)} tokens"


# ------------------------------------------------------------- prefix cache


async def prefix_cache_writer(api):
    """Warm the shared cache: everything except the last prompt token is
    forwarded into pages that get exported under the given name. The last
    token goes into a private page in a second forward submitted back to
    back with the first, so the pair fuses into one prefill batch."""
    pos, opt = _opts(api.get_args())
    _need(pos, 2, "prefix_cache_writer <name> <prefix> [--gen N]")
    name, prefix = pos[0], pos[1]
    gen_n = int(opt.get("gen", 8))
    q = api.create_queue(opt.get("model"))
    cap = api.page_capacity()

    ids = [BOS] + list(await api.tokenize(q, prefix))
    n = len(ids)
    shared_n = n - 1
    shared = api.alloc_kvpages(q, -(-shared_n // cap))
    embs = api.alloc_embs(q, n)
    api.embed_text(q, ids, list(range(n)), embs)
    api.forward(q, [], embs[:shared_n], shared, [])
    own = list(api.alloc_kvpages(q, 1))
    own_used = 1
    await api.forward(q, shared, [embs[n - 1]], own, [embs[n - 1]])
    api.export_kvpages(shared, name)

    state = embs[n - 1]
    e = embs[0]
    vocab = await api.vocabs(q)
    out = bytearray()
    pos_next = n
    for _ in range(gen_n):
        dist = await api.next_dist(q, state, 1)
        t = dist.argmax()
        if t == EOS:
            break
        out += vocab[t]
        if own_used == cap * len(own):
            own.extend(api.alloc_kvpages(q, 1))
        api.embed_text(q, [t], [pos_next], [e])
        api.forward(q, shared + own, [e], own, [e])
        own_used += 1
        pos_next += 1
        state = e
    if out:
        api.send(bytes(out))
    return f"exported {shared_n} tokens as {name!r}"


async def prefix_cache_reader(api):
    """Reuse an exported prefix: import pages covering all but the last
    shared token, then forward just that token plus any suffix. Falls back
    to a full prefill when the name is missing or --fresh is given."""
    pos, opt = _opts(api.get_args())
    _need(pos, 2, "prefix_cache_reader <name> <prefix> [suffix] [--gen N]")
    name, prefix = pos[0], pos[1]
    suffix = pos[2] if len(pos) > 2 else ""
    gen_n = int(opt.get("gen", 8))
    q = api.create_queue(opt.get("model"))
    cap = api.page_capacity()

    head = [BOS] + list(await api.tokenize(q, prefix))
    tail = list(await api.tokenize(q, suffix)) if suffix else []
    ids = head + tail
    n = len(ids)

    shared: List[object] = []
    if not opt.get("fresh"):
        try:
            shared = api.import_kvpages(name)
        except NameNotFound:
            shared = []
    redo = ids[len(head) - 1:] if shared else ids
    base = n - len(redo)

    own = list(api.alloc_kvpages(q, -(-len(redo) // cap)))
    own_used = len(redo)
    embs = api.alloc_embs(q, len(redo))
    api.embed_text(q, redo, list(range(base, n)), embs)
    await api.forward(q, shared, embs, own, [embs[-1]])

    state = embs[-1]
    e = embs[0]
    vocab = await api.vocabs(q)
    out = bytearray()
    pos_next = n
    for _ in range(gen_n):
        dist = await api.next_dist(q, state, 1)
        t = dist.argmax()
        if t == EOS:
            break
        out += vocab[t]
        if own_used == cap * len(own):
            own.extend(api.alloc_kvpages(q, 1))
        api.embed_text(q, [t], [pos_next], [e])
        api.forward(q, shared + own, [e], own, [e])
        own_used += 1
        pos_next += 1
        state = e
    if out:
        api.send(bytes(out))
    return f"prefilled {len(redo)} of {n} tokens"


# --------------------------------------------------------------------- beam


async def beam_search(api):
    """Width-W beam over greedy log-probabilities. Hypotheses are scored by
    summed ln(p); ties break toward the lexicographically smallest token
    sequence. Finished (EOS) hypotheses compete with live ones at the end."""
    pos, opt = _opts(api.get_args())
    _need(pos, 1, "beam_search <prompt> [--width W] [--steps D]")
    width = int(opt.get("width", 4))
    steps = int(opt.get("steps", 12))
    if width < 1:
        raise InvalidArgument("beam width must be >= 1")
    model = opt.get("model")

    root = Context(api, model)
    await root.fill(pos[0])
    beams: List[Tuple[Context, float, List[int]]] = [(root, 0.0, [])]
    done: List[Tuple[float, List[int]]] = []

    for _ in range(steps):
        if not beams:
            break
        for ctx, _, _ in beams:
            ctx.step()
        pends = [api.next_dist(ctx.q, ctx.last_state, width) for ctx, _, _ in beams]
        dists = []
        for c in pends:
            dists.append(await c)

        cands: List[Tuple[float, List[int], Context, int]] = []
        for (ctx, score, toks), dist in zip(beams, dists):
            for t, p in dist.entries[:width]:
                cands.append((score + math.log(float(p)), toks + [t], ctx, t))
        cands.sort(key=lambda c: (-c[0], c[1]))
        keep = cands[:width]

        survivors: List[Tuple[Context, float, List[int]]] = []
        for score, toks, parent, t in keep:
            if t == EOS:
                done.append((score, toks))
                continue
            child = await parent.fork()
            child.append(t)
            survivors.append((child, score, toks))
        for ctx, _, _ in beams:
            ctx.close()
        beams = survivors

    pool = done + [(score, toks) for _, score, toks in beams]
    for ctx, _, _ in beams:
        ctx.close()
    if not pool:
        return "no hypotheses"
    pool.sort(key=lambda h: (-h[0], h[1]))
    best_score, best = pool[0]
    api.send(bytes(t for t in best if t < 256))
    return f"score {best_score:.6f}"


# -------------------------------------------------------------- speculation


class _Strip:
    """Page strip with local fill and mask mirrors, for builtins that place
    and mask slots directly."""

    def __init__(self, api, q, cap: int):
        self.api = api
        self.q = q
        self.cap = cap
        self.pages: List[object] = []
        self.fills: List[int] = []
        self.masks: List[List[bool]] = []

    def okv_for(self, n: int) -> List[object]:
        free = sum(self.cap - f for f in self.fills)
        if free < n:
            fresh = self.api.alloc_kvpages(self.q, -(-(n - free) // self.cap))
            self.pages.extend(fresh)
            self.fills.extend(0 for _ in fresh)
            self.masks.extend([] for _ in fresh)
        return [p for p, f in zip(self.pages, self.fills) if f < self.cap]

    def note_fill(self, n: int) -> List[Tuple[int, int]]:
        """Mirror the dense placement of n slots; returns (page, slot) pairs."""
        placed = []
        for i, fill in enumerate(self.fills):
            while fill < self.cap and len(placed) < n:
                placed.append((i, fill))
                self.masks[i].append(False)
                fill += 1
            self.fills[i] = fill
            if len(placed) == n:
                break
        if len(placed) != n:
            raise InvalidArgument("strip out of slots; call okv_for first")
        return placed

    def mask_slots(self, pairs: List[Tuple[int, int]]) -> None:
        touched = set()
        for pi, si in pairs:
            self.masks[pi][si] = True
            touched.add(pi)
        for pi in sorted(touched):
            self.api.mask_kvpage(self.q, self.pages[pi], list(self.masks[pi]))

    def unmasked_count(self) -> int:
        return sum(sum(1 for m in row if not m) for row in self.masks)


def _find_draft(seq: List[int], ngram: int, k: int) -> List[int]:
    """Prompt lookup: tokens that followed the most recent earlier
    occurrence of the trailing n-gram."""
    if len(seq) <= ngram or k < 1:
        return []
    key = seq[-ngram:]
    for j in range(len(seq) - ngram - 1, -1, -1):
        if seq[j:j + ngram] == key:
            return seq[j + ngram: j + ngram + k]
    return []


async def speculative_prompt_lookup(api):
    """Greedy decoding with prompt-lookup drafts verified in one forward.

    The KV strip holds every confirmed token except the newest, which rides
    along as the first input of the next verification call. Rejected draft
    slots stay in their pages but are masked out, so later tokens may reuse
    their positions.
    """
    pos, opt = _opts(api.get_args())
    _need(pos, 1, "speculative_prompt_lookup <prompt> [--max-new N] [--ngram G] [--draft K]")
    max_new = int(opt.get("max_new", 32))
    ngram = int(opt.get("ngram", 2))
    draft_k = int(opt.get("draft", 4))
    q = api.create_queue(opt.get("model"))
    cap = api.page_capacity()
    strip = _Strip(api, q, cap)

    seq = [BOS] + list(await api.tokenize(q, pos[0]))
    embs = api.alloc_embs(q, draft_k + 1)
    if len(seq) > 1:
        pre = api.alloc_embs(q, len(seq) - 1)
        api.embed_text(q, seq[:-1], list(range(len(seq) - 1)), pre)
        okv = strip.okv_for(len(seq) - 1)
        api.forward(q, list(strip.pages), pre, okv, [])
        strip.note_fill(len(seq) - 1)
        api.dealloc_embs(q, pre)

    vocab = await api.vocabs(q)
    produced = 0
    out = bytearray()
    while produced < max_new:
        p = len(seq) - 1
        draft = _find_draft(seq, ngram, min(draft_k, max_new - produced))
        k = len(draft)
        inputs = [seq[-1]] + draft
        api.embed_text(q, inputs, list(range(p, p + k + 1)), embs[:k + 1])
        okv = strip.okv_for(k + 1)
        ikv = list(strip.pages)
        api.forward(q, ikv, embs[:k + 1], okv, embs[:k + 1])
        placed = strip.note_fill(k + 1)

        pends = [api.next_dist(q, embs[i], 1) for i in range(k + 1)]
        greedy = []
        for c in pends:
            greedy.append((await c).argmax())

        a = 0
        while a < k and draft[a] == greedy[a]:
            a += 1
        confirmed = draft[:a] + [greedy[a]]
        if a < k:
            strip.mask_slots(placed[a + 1:])

        hit_eos = False
        for t in confirmed:
            if t == EOS:
                hit_eos = True
                break
            seq.append(t)
            out += vocab[t]
            produced += 1
            if produced >= max_new:
                break
        if out:
            api.send(bytes(out))
            out = bytearray()
        if hit_eos:
            break
    return f"emitted {produced} tokens"


# -------------------------------------------------------- visibility windows


async def _masked_decode(api, prompt: str, max_new: int, sink: int,
                         window: int, model: Optional[str]):
    """Greedy decoding that caps attention to the first `sink` positions
    plus the trailing `window`, masking everything in between."""
    q = api.create_queue(model)
    cap = api.page_capacity()
    strip = _Strip(api, q, cap)
    budget = sink + window
    if window < 1:
        raise InvalidArgument("window must be >= 1")

    seq = [BOS] + list(await api.tokenize(q, prompt))
    order: List[Tuple[int, int]] = []  # unmasked (page, slot), oldest first

    def enforce(placed):
        order.extend(placed)
        extra = len(order) - budget
        if extra > 0:
            victims = order[sink:sink + extra]
            del order[sink:sink + extra]
            strip.mask_slots(victims)

    n = len(seq)
    embs = api.alloc_embs(q, n)
    api.embed_text(q, seq, list(range(n)), embs)
    okv = strip.okv_for(n)
    api.forward(q, [], embs, okv, [embs[-1]])
    enforce(strip.note_fill(n))

    vocab = await api.vocabs(q)
    state = embs[-1]
    e = embs[0]
    out = bytearray()
    pos_next = n
    for _ in range(max_new):
        dist = await api.next_dist(q, state, 1)
        t = dist.argmax()
        if t == EOS:
            break
        out += vocab[t]
        api.embed_text(q, [t], [pos_next], [e])
        okv = strip.okv_for(1)
        api.forward(q, list(strip.pages), [e], okv, [e])
        enforce(strip.note_fill(1))
        state = e
        pos_next += 1
    if out:
        api.send(bytes(out))
    return f"kept <= {budget} visible of {pos_next} positions"


async def attention_sink(api):
    pos, opt = _opts(api.get_args())
    _need(pos, 1, "attention_sink <prompt> [--sink S] [--window W] [--max-new N]")
    return await _masked_decode(
        api, pos[0], int(opt.get("max_new", 32)), int(opt.get("sink", 4)),
        int(opt.get("window", 16)), opt.get("model"))


async def windowed_attention(api):
    pos, opt = _opts(api.get_args())
    _need(pos, 1, "windowed_attention <prompt> [--window W] [--max-new N]")
    return await _masked_decode(
        api, pos[0], int(opt.get("max_new", 32)), 0,
        int(opt.get("window", 16)), opt.get("model"))


# -------------------------------------------------------------------- agent


async def agent_http(api):
    """Think/act loop: generate bounded thought, mark the action, fetch a
    URL, keep generating while the response is in flight (unless
    --no-overlap), then append the observation to the same context. Nothing
    is ever re-prefilled; the KV state persists across rounds."""
    pos, opt = _opts(api.get_args())
    _need(pos, 1, "agent_http <question> --url U [--rounds R] [--think N] [--no-overlap]")
    url = opt.get("url")
    if not url:
        raise InvalidArgument("agent_http needs --url")
    rounds = int(opt.get("rounds", 2))
    think = int(opt.get("think", 12))
    post_think = int(opt.get("post_think", think))
    answer = int(opt.get("answer", 16))
    overlap = not opt.get("no_overlap")
    greedy = GreedySampler()

    ctx = Context(api, opt.get("model"))
    await ctx.fill("Q: " + pos[0] + "\nTHINK: ")
    for r in range(rounds):
        await ctx.generate(greedy, think, stop_eos=False)
        api.send(b"[act]")
        fetch = api.http_get(f"{url}?r={r}" if "?" not in str(url) else str(url))
        if overlap:
            await ctx.generate(greedy, post_think, stop_eos=False)
            resp = await fetch
        else:
            resp = await fetch
            await ctx.generate(greedy, post_think, stop_eos=False)
        await ctx.fill(b"\nOBS: " + resp.body + b"\nTHINK: ")
    _, text = await ctx.generate(greedy, answer, stop_eos=False, stream=True)
    ctx.close()
    return f"answered after {rounds} rounds"


BUILTINS = {
    "text_completion": text_completion,
    "prefix_cache_writer": prefix_cache_writer,
    "prefix_cache_reader": prefix_cache_reader,
    "beam_search": beam_search,
    "speculative_prompt_lookup": speculative_prompt_lookup,
    "attention_sink": attention_sink,
    "windowed_attention": windowed_attention,
    "agent_http": agent_http,
}
