"""Virtualized KV pages and embeds.

The control layer owns everything in this module: free lists, per-program
address spaces, refcounts, the export registry, and a projected mirror of
page/embed state. The mirror reflects what each resource will contain once
all previously submitted calls have executed, which lets the host API
validate and fail fast at submission time while actual token payloads live
in the inference layer's arena (see backends.arena).

Ownership rules:
  - a handle is only dereferenceable by the program that owns it
  - imported pages are read-only; mutation requires copy_kvpage into owned pages
  - exported pages are immutable forever and survive the exporter via the
    registry's refcount; importers add one reference each
  - embeds are never shared across programs
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import (
    DoubleFree,
    ImmutableTarget,
    InvalidArgument,
    InvalidHandle,
    NameNotFound,
    NameTaken,
    PoolExhausted,
    RangeMismatch,
)

PAGE = "kvpage"
EMB = "embed"


@dataclass(frozen=True)
class ResourceHandle:
    """Opaque capability naming one page or embed inside an owner's space."""

    owner: int
    kind: str
    index: int

    def __repr__(self):
        return f"<{self.kind}:{self.owner}/{self.index}>"


@dataclass
class TokenSlot:
    """One cached token: its sequence position, backend payload, and mask bit."""

    position: int
    payload: object = None
    masked: bool = False

    def clone(self) -> "TokenSlot":
        return TokenSlot(self.position, self.payload, self.masked)


@dataclass
class KvPage:
    """Fixed-capacity block of token slots, filled densely from index 0."""

    capacity: int
    slots: List[TokenSlot] = field(default_factory=list)

    @property
    def fill(self) -> int:
        return len(self.slots)

    @property
    def free(self) -> int:
        return self.capacity - len(self.slots)


@dataclass
class Embed:
    """One token-embedding cell; payload format is backend-defined."""

    filled: bool = False
    kind: str = "unfilled"  # unfilled | input | output
    position: int = -1
    payload: object = None


# ---------------------------------------------------------------- metadata


@dataclass
class _SlotMeta:
    position: int
    masked: bool


@dataclass
class _PageMeta:
    capacity: int
    refcount: int = 1
    immutable: bool = False
    slots: List[_SlotMeta] = field(default_factory=list)

    @property
    def fill(self) -> int:
        return len(self.slots)

    def unmasked_positions(self) -> List[int]:
        return [s.position for s in self.slots if not s.masked]


@dataclass
class _EmbMeta:
    kind: str = "unfilled"  # unfilled | input | output
    position: int = -1
    token: int = -1


@dataclass
class _Binding:
    phys: int
    imported: bool = False


@dataclass
class _RegistryEntry:
    exporter: int
    pages: List[int]


class AddressSpace:
    """Per-program handle table for one resource kind."""

    def __init__(self, owner: int, kind: str):
        self.owner = owner
        self.kind = kind
        self.bindings: Dict[int, _Binding] = {}
        self.freed: set[int] = set()
        self._next = 0

    def bind(self, phys: int, imported: bool = False) -> ResourceHandle:
        vid = self._next
        self._next += 1
        self.bindings[vid] = _Binding(phys, imported)
        return ResourceHandle(self.owner, self.kind, vid)

    def lookup(self, handle: ResourceHandle) -> _Binding:
        if handle.kind != self.kind or handle.owner != self.owner:
            raise InvalidHandle(f"{handle!r} does not belong to program {self.owner}")
        b = self.bindings.get(handle.index)
        if b is None:
            if handle.index in self.freed:
                raise DoubleFree(f"{handle!r} was already deallocated")
            raise InvalidHandle(f"{handle!r} is not mapped")
        return b

    def unbind(self, handle: ResourceHandle) -> _Binding:
        b = self.lookup(handle)
        del self.bindings[handle.index]
        self.freed.add(handle.index)
        return b


class ResourceManager:
    """All pool, mapping, refcount, and registry state for one server."""

    def __init__(self, kv_pages: int, embeds: int, page_capacity: int):
        self.total_pages = kv_pages
        self.total_embs = embeds
        self.page_capacity = page_capacity
        self.free_pages: List[int] = list(range(kv_pages - 1, -1, -1))
        self.free_embs: List[int] = list(range(embeds - 1, -1, -1))
        self.page_meta: Dict[int, _PageMeta] = {}
        self.emb_meta: Dict[int, _EmbMeta] = {}
        self.spaces: Dict[int, Dict[str, AddressSpace]] = {}
        self.registry: Dict[str, _RegistryEntry] = {}
        # phys ids whose refcount decrement is deferred to dealloc execution,
        # keyed by owner so teardown can settle cancelled deallocs
        self.pending_release: Dict[int, List[Tuple[str, int]]] = {}

    # ------------------------------------------------------------ spaces

    def create_space(self, owner: int) -> None:
        self.spaces[owner] = {PAGE: AddressSpace(owner, PAGE), EMB: AddressSpace(owner, EMB)}

    def _space(self, owner: int, kind: str) -> AddressSpace:
        try:
            return self.spaces[owner][kind]
        except KeyError:
            raise InvalidHandle(f"program {owner} has no address space")

    # -------------------------------------------------------- allocation

    def free_page_count(self) -> int:
        return len(self.free_pages)

    def free_emb_count(self) -> int:
        return len(self.free_embs)

    def pages_held(self, owner: int) -> int:
        """Pages this owner's bindings plus its uncommitted releases pin."""
        held = 0
        if owner in self.spaces:
            held += len(self.spaces[owner][PAGE].bindings)
        held += sum(1 for k, _ in self.pending_release.get(owner, []) if k == PAGE)
        return held

    def alloc_pages(self, owner: int, count: int) -> List[ResourceHandle]:
        if count < 1:
            raise InvalidArgument("page count must be >= 1")
        if count > len(self.free_pages):
            raise PoolExhausted(f"need {count} pages, {len(self.free_pages)} free")
        space = self._space(owner, PAGE)
        handles = []
        for _ in range(count):
            phys = self.free_pages.pop()
            self.page_meta[phys] = _PageMeta(capacity=self.page_capacity)
            handles.append(space.bind(phys))
        return handles

    def alloc_embs(self, owner: int, count: int) -> List[ResourceHandle]:
        if count < 1:
            raise InvalidArgument("embed count must be >= 1")
        if count > len(self.free_embs):
            raise PoolExhausted(f"need {count} embeds, {len(self.free_embs)} free")
        space = self._space(owner, EMB)
        handles = []
        for _ in range(count):
            phys = self.free_embs.pop()
            self.emb_meta[phys] = _EmbMeta()
            handles.append(space.bind(phys))
        return handles

    # ------------------------------------------------------ deallocation

    def schedule_dealloc(self, owner: int, handles: Sequence[ResourceHandle], kind: str) -> List[int]:
        """Invalidate mappings now; physical release happens at commit.

        Returns the physical ids for the queued dealloc call.
        """
        space = self._space(owner, kind)
        seen = set()
        for h in handles:
            space.lookup(h)
            if h.index in seen:
                raise DoubleFree(f"{h!r} listed twice")
            seen.add(h.index)
        phys_ids = []
        pend = self.pending_release.setdefault(owner, [])
        for h in handles:
            b = space.unbind(h)
            phys_ids.append(b.phys)
            pend.append((kind, b.phys))
        return phys_ids

    def commit_release(self, owner: int, kind: str, phys_ids: Sequence[int]) -> None:
        pend = self.pending_release.get(owner, [])
        for phys in phys_ids:
            try:
                pend.remove((kind, phys))
            except ValueError:
                continue  # settled already by teardown
            self._decref(kind, phys)

    def _decref(self, kind: str, phys: int) -> None:
        if kind == PAGE:
            meta = self.page_meta[phys]
            meta.refcount -= 1
            if meta.refcount == 0:
                del self.page_meta[phys]
                self.free_pages.append(phys)
        else:
            # embeds are never shared, so a release always frees
            del self.emb_meta[phys]
            self.free_embs.append(phys)

    def release_instance(self, owner: int) -> None:
        """Drop every reference the program still holds (exit or termination)."""
        spaces = self.spaces.pop(owner, None)
        if spaces is not None:
            for b in spaces[PAGE].bindings.values():
                self._decref(PAGE, b.phys)
            for b in spaces[EMB].bindings.values():
                self._decref(EMB, b.phys)
        for kind, phys in self.pending_release.pop(owner, []):
            self._decref(kind, phys)

    # -------------------------------------------------------- resolution

    def resolve_page(self, owner: int, handle: ResourceHandle, *, writable: bool) -> Tuple[int, _PageMeta]:
        b = self._space(owner, PAGE).lookup(handle)
        meta = self.page_meta[b.phys]
        if writable:
            if b.imported:
                raise ImmutableTarget(f"{handle!r} is an imported page")
            if meta.immutable:
                raise ImmutableTarget(f"{handle!r} was exported")
        return b.phys, meta

    def resolve_emb(self, owner: int, handle: ResourceHandle) -> Tuple[int, _EmbMeta]:
        b = self._space(owner, EMB).lookup(handle)
        return b.phys, self.emb_meta[b.phys]

    # ---------------------------------------------------- export/import

    def export_pages(self, owner: int, handles: Sequence[ResourceHandle], name: str) -> None:
        if name in self.registry:
            raise NameTaken(f"export name {name!r} already registered")
        if not handles:
            raise InvalidArgument("cannot export an empty page list")
        space = self._space(owner, PAGE)
        phys_ids = []
        for h in handles:
            b = space.lookup(h)
            if b.imported:
                raise ImmutableTarget(f"{h!r} is imported and cannot be re-exported")
            phys_ids.append(b.phys)
        for phys in phys_ids:
            meta = self.page_meta[phys]
            meta.immutable = True
            meta.refcount += 1
        self.registry[name] = _RegistryEntry(exporter=owner, pages=phys_ids)

    def import_pages(self, owner: int, name: str) -> List[ResourceHandle]:
        entry = self.registry.get(name)
        if entry is None:
            raise NameNotFound(f"no export named {name!r}")
        space = self._space(owner, PAGE)
        handles = []
        for phys in entry.pages:
            self.page_meta[phys].refcount += 1
            handles.append(space.bind(phys, imported=True))
        return handles

    def unexport_pages(self, owner: int, name: str) -> None:
        entry = self.registry.get(name)
        if entry is None:
            raise NameNotFound(f"no export named {name!r}")
        if entry.exporter != owner:
            raise InvalidHandle(f"{name!r} was exported by program {entry.exporter}")
        del self.registry[name]
        for phys in entry.pages:
            self._decref(PAGE, phys)

    def clear_registry(self) -> None:
        """Server shutdown: drop every registry reference."""
        for name in list(self.registry):
            entry = self.registry.pop(name)
            for phys in entry.pages:
                self._decref(PAGE, phys)

    # ------------------------------------------------- projected updates

    def project_append(self, phys: int, positions: Sequence[int]) -> List[int]:
        """Record okv writes; returns the slot indices that will be filled."""
        meta = self.page_meta[phys]
        if meta.fill + len(positions) > meta.capacity:
            raise RangeMismatch("page overflow in projection")
        base = meta.fill
        for p in positions:
            meta.slots.append(_SlotMeta(position=p, masked=False))
        return list(range(base, base + len(positions)))

    def project_mask(self, phys: int, mask: Sequence[bool]) -> None:
        meta = self.page_meta[phys]
        for s, m in zip(meta.slots, mask):
            s.masked = bool(m)

    def project_copy(self, src_phys: int, src_start: int, dst_phys: int, dst_start: int, n: int) -> None:
        src = self.page_meta[src_phys]
        dst = self.page_meta[dst_phys]
        for i in range(n):
            s = src.slots[src_start + i]
            di = dst_start + i
            if di < dst.fill:
                dst.slots[di] = _SlotMeta(s.position, s.masked)
            else:
                dst.slots.append(_SlotMeta(s.position, s.masked))

    def project_embed(self, phys: int, token: int, position: int) -> None:
        meta = self.emb_meta[phys]
        meta.kind = "input"
        meta.position = position
        meta.token = token

    def project_output(self, phys: int, position: int) -> None:
        meta = self.emb_meta[phys]
        meta.kind = "output"
        meta.position = position
        meta.token = -1

    # -------------------------------------------------------------- audit

    def audit(self) -> None:
        """Conservation check: every page/embed is either free or referenced."""
        live_pages = len(self.page_meta)
        if len(self.free_pages) + live_pages != self.total_pages:
            raise AssertionError(
                f"page conservation violated: {len(self.free_pages)} free + "
                f"{live_pages} live != {self.total_pages}"
            )
        live_embs = len(self.emb_meta)
        if len(self.free_embs) + live_embs != self.total_embs:
            raise AssertionError(
                f"embed conservation violated: {len(self.free_embs)} free + "
                f"{live_embs} live != {self.total_embs}"
            )
        for phys, meta in self.page_meta.items():
            if meta.refcount < 1:
                raise AssertionError(f"page {phys} live with refcount {meta.refcount}")
