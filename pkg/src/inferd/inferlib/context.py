"""Managed generation state over the raw host API.

A Context owns one command queue, a growing strip of KV pages, and a small
embed pool. Tokens are appended logically and forwarded lazily: everything
still pending is flushed by the next step(), so consecutive appends cost one
model call. Forks share completed pages by local refcount (pages are
append-only once full) and copy the partial tail page, which is what makes
beam search cheap.

Ordering note: all calls for one context ride its own queue, so program
order is preserved without awaiting each completion; the only await a
generation loop needs is the distribution read.
"""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

from ..backends.base import BOS, EOS
from ..errors import InvalidArgument


class _SharedPage:
    __slots__ = ("handle", "refs")

    def __init__(self, handle):
        self.handle = handle
        self.refs = 1


class Context:
    def __init__(self, api, model: Optional[str] = None, queue=None):
        self.api = api
        self.model = model
        self.q = queue if queue is not None else api.create_queue(model)
        self.capacity = api.page_capacity()
        self.full: List[_SharedPage] = []
        self.partial = None
        self.partial_used = 0
        self.tokens: List[int] = []
        self.pending: List[int] = []
        self.embs: List[object] = []
        self.last_state = None
        self._vocab: Optional[List[bytes]] = None
        self.closed = False

    # ------------------------------------------------------------ building

    async def fill(self, data, bos: Optional[bool] = None) -> List[int]:
        """Tokenize and append; BOS is prepended on the first fill."""
        if isinstance(data, str):
            data = data.encode("utf-8")
        ids = await self.api.tokenize(self.q, data)
        if bos is None:
            bos = not self.tokens
        if bos:
            ids = [BOS] + ids
        self.fill_tokens(ids)
        return ids

    def fill_tokens(self, ids: Sequence[int]) -> None:
        ids = [int(t) for t in ids]
        self.tokens.extend(ids)
        self.pending.extend(ids)

    def append(self, token: int) -> None:
        self.fill_tokens([token])

    @property
    def position(self) -> int:
        """Next position to be assigned."""
        return len(self.tokens)

    # ------------------------------------------------------------- compute

    def _ensure_embs(self, n: int) -> None:
        if len(self.embs) < n:
            self.embs.extend(self.api.alloc_embs(self.q, n - len(self.embs)))

    def _ensure_slots(self, n: int) -> Tuple[List[object], List[object]]:
        """Output pages with room for n new entries, partial tail first."""
        okv = []
        free = 0
        if self.partial is not None and self.partial_used < self.capacity:
            okv.append(self.partial)
            free = self.capacity - self.partial_used
        fresh: List[object] = []
        if free < n:
            need = -(-(n - free) // self.capacity)
            fresh = self.api.alloc_kvpages(self.q, need)
            okv.extend(fresh)
        return okv, fresh

    def step(self, states: int = 1, holdback: int = 0):
        """Flush pending tokens (minus holdback) through one forward call.

        Returns the submitted completion, or None when nothing was pending.
        The completion's info carries the slot placements.
        """
        n = len(self.pending) - holdback
        if n <= 0:
            return None
        toks = self.pending[:n]
        base = len(self.tokens) - len(self.pending)
        positions = list(range(base, base + n))
        states = min(max(states, 0), n)

        self._ensure_embs(n)
        embs = self.embs[:n]
        self.api.embed_text(self.q, toks, positions, embs)

        ikv = [sp.handle for sp in self.full]
        if self.partial is not None:
            ikv.append(self.partial)
        okv, fresh = self._ensure_slots(n)
        oemb = embs[n - states:n] if states else []
        c = self.api.forward(self.q, ikv, embs, okv, oemb)

        self._absorb(fresh, n)
        self.pending = self.pending[n:]
        if states:
            self.last_state = embs[n - 1]
        return c

    def _absorb(self, fresh_pages, n: int) -> None:
        # mirror the dense fill the kernel just projected: tail page first,
        # then each fresh page in order
        rem = n
        if self.partial is not None:
            take = min(self.capacity - self.partial_used, rem)
            self.partial_used += take
            rem -= take
            if self.partial_used == self.capacity:
                self.full.append(_SharedPage(self.partial))
                self.partial = None
                self.partial_used = 0
        for page in fresh_pages:
            take = min(self.capacity, rem)
            rem -= take
            if take == self.capacity:
                self.full.append(_SharedPage(page))
            else:
                self.partial = page
                self.partial_used = take

    async def next_dist(self, k: Optional[int] = None):
        if self.pending:
            self.step()
        if self.last_state is None:
            raise InvalidArgument("no output state; fill the context first")
        return await self.api.next_dist(self.q, self.last_state, k)

    # ---------------------------------------------------------- generation

    async def _piece(self, token: int) -> bytes:
        if self._vocab is None:
            self._vocab = await self.api.vocabs(self.q)
        return self._vocab[token]

    async def generate(self, sampler, max_tokens: int, *, stop_eos: bool = True,
                       stop_text: Optional[str] = None, stream: bool = False,
                       k: Optional[int] = None) -> Tuple[List[int], bytes]:
        """Sample up to max_tokens; returns (token ids, rendered bytes)."""
        needle = stop_text.encode("utf-8") if stop_text else None
        if k is None:
            k = getattr(sampler, "wants_k", None)
        out: List[int] = []
        text = bytearray()
        for i in range(max_tokens):
            dist = await self.next_dist(k)
            t = sampler.pick(dist, i)
            if stop_eos and t == EOS:
                break
            self.append(t)
            out.append(t)
            piece = await self._piece(t)
            text += piece
            if stream and piece:
                self.api.send(piece)
            if needle and needle in text[-(len(needle) + 8):]:
                break
        return out, bytes(text)

    # ------------------------------------------------------------- forking

    async def fork(self) -> "Context":
        """Branch the sequence: full pages shared, tail page copied.

        Pending tokens must be flushed first; the child has no output state
        until it steps, so append a token before asking it for a
        distribution.
        """
        if self.pending:
            raise InvalidArgument("flush pending tokens before forking")
        await self.api.synchronize(self.q)
        child = Context(self.api, self.model)
        child.tokens = list(self.tokens)
        child.full = list(self.full)
        for sp in self.full:
            sp.refs += 1
        if self.partial is not None and self.partial_used:
            [page] = self.api.alloc_kvpages(child.q, 1)
            # await the copy so the parent may be closed as soon as we return
            await self.api.copy_kvpage(child.q, self.partial, page, 0, 0,
                                       self.partial_used)
            child.partial = page
            child.partial_used = self.partial_used
        return child

    # ------------------------------------------------------------- cleanup

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        doomed = []
        if self.partial is not None:
            doomed.append(self.partial)
            self.partial = None
        # full pages are shared with forks; the last closer frees them
        survivors = []
        for sp in self.full:
            sp.refs -= 1
            if sp.refs == 0:
                doomed.append(sp.handle)
        self.full = []
        if doomed:
            self.api.dealloc_kvpages(self.q, doomed)
        if self.embs:
            self.api.dealloc_embs(self.q, self.embs)
            self.embs = []
        self.last_state = None
