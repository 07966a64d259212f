"""Command queues and the batch scheduler.

One logical coordinator owns everything here; nothing in this module is
thread-safe by itself. Calls enter per-queue FIFOs with their arguments
already resolved to physical ids, carrying read/write footprints for fusion
analysis. Batches are formed per (model, call type): the heads of all queues
whose head matches the type join horizontally, consecutive fusible calls from
the same queue join vertically, members are ordered by (queue priority desc,
submission seq asc), and the tail is truncated to the cap (input tokens for
forward, call count otherwise) without touching the survivors' timestamps.
Among the per-type candidates the scheduler picks the one whose oldest
member has waited longest, break ties by fixed type order.

Dispatch policies gate when a formed batch may leave:
  eager     every call dispatches alone, oldest first
  k(n)      a type dispatches once n same-type calls are batchable
            (documented hazard: fewer than n pending calls starve)
  t(ms)     a type dispatches once its oldest member waited at least t
  adaptive  dispatch whenever the handler is idle and anything pends

A handler executes one batch at a time per model; completion immediately
re-arms formation, so the adaptive policy is work-conserving.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from .config import PolicySpec
from .errors import InvalidQueue

# fixed tie-break order for candidate selection; earlier wins
TYPE_ORDER = (
    "forward",
    "embed_txt",
    "get_next_dist",
    "tokenize",
    "detokenize",
    "get_vocabs",
    "mask_kvpage",
    "copy_kvpage",
    "alloc_kvpage",
    "alloc_emb",
    "dealloc_kvpage",
    "dealloc_emb",
)
_TYPE_RANK = {t: i for i, t in enumerate(TYPE_ORDER)}

TOKEN_CAPPED = ("forward",)


@dataclass
class PendingCall:
    seq: int
    ctype: str
    args: dict
    queue: "CommandQueue"
    enqueue_t: float
    completion: object
    tokens: int = 1
    # fusion footprints, physical ids
    wslots: frozenset = frozenset()   # {(page, slot)} written by okv
    wpages: frozenset = frozenset()   # pages written wholesale (mask, copy, alloc)
    wembs: frozenset = frozenset()    # embeds written
    rembs: frozenset = frozenset()    # embeds read
    rpages: frozenset = frozenset()   # pages read as ikv or copy source
    max_write_pos: dict = field(default_factory=dict)  # page -> max position written
    min_input_pos: Optional[int] = None


def compatible(a: PendingCall, b: PendingCall) -> bool:
    """May b execute in the same fused batch group after a."""
    if a.wslots & b.wslots or a.wembs & b.wembs or a.wpages & b.wpages:
        return False
    a_wslot_pages = {p for p, _ in a.wslots}
    b_wslot_pages = {p for p, _ in b.wslots}
    if a_wslot_pages & b.wpages or a.wpages & b_wslot_pages:
        return False
    if a.wembs & b.rembs:
        return False
    if a.wpages & b.rpages:
        return False
    if b.min_input_pos is not None:
        for pid in b.rpages & a_wslot_pages:
            if a.max_write_pos.get(pid, -1) >= b.min_input_pos:
                return False
    return True


def fusible(a: PendingCall, b: PendingCall) -> bool:
    """Spec predicate: b immediately follows a on the same queue."""
    if a.queue is not b.queue or a.ctype != b.ctype:
        return False
    return compatible(a, b)


class CommandQueue:
    """FIFO of pending calls bound to one model, with a dispatch priority."""

    def __init__(self, qid: int, instance_id: int, model: str, created_seq: int):
        self.qid = qid
        self.instance_id = instance_id
        self.model = model
        self.priority = 0
        self.pending: List[PendingCall] = []
        self.inflight = 0
        self.sync_waiters: List[object] = []
        self.created_seq = created_seq
        self.closed = False

    def quiescent(self) -> bool:
        return not self.pending and self.inflight == 0

    def __repr__(self):
        return f"<queue {self.qid} model={self.model} prio={self.priority}>"


@dataclass
class Batch:
    batch_id: int
    model: str
    ctype: str
    members: List[PendingCall]
    tokens: int
    formed_t: float

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class _Candidate:
    ctype: str
    members: List[PendingCall]
    tokens: int
    oldest_t: float


class ModelLane:
    """Scheduler state for one model: its queues, policy, and busy flag."""

    def __init__(self, model: str, policy: PolicySpec, cap_tokens: int, cap_calls: int):
        self.model = model
        self.policy = policy
        self.cap_tokens = cap_tokens
        self.cap_calls = cap_calls
        self.queues: List[CommandQueue] = []
        self.busy = False

    def add_queue(self, q: CommandQueue) -> None:
        self.queues.append(q)

    def drop_queue(self, q: CommandQueue) -> None:
        if q in self.queues:
            self.queues.remove(q)

    def has_pending(self) -> bool:
        return any(q.pending for q in self.queues)

    # ------------------------------------------------------- formation

    def _form_candidates(self) -> List[_Candidate]:
        by_type: Dict[str, List[List[PendingCall]]] = {}
        for q in self.queues:
            if not q.pending:
                continue
            head = q.pending[0]
            group = [head]
            for nxt in q.pending[1:]:
                if nxt.ctype != head.ctype:
                    break
                if not all(compatible(m, nxt) for m in group):
                    break
                group.append(nxt)
            by_type.setdefault(head.ctype, []).append(group)

        cands = []
        for ctype, groups in by_type.items():
            members = [m for g in groups for m in g]
            members.sort(key=lambda m: (-m.queue.priority, m.seq))
            # truncate the tail at the cap; survivors keep their timestamps
            if ctype in TOKEN_CAPPED:
                kept, total = [], 0
                for m in members:
                    if kept and total + m.tokens > self.cap_tokens:
                        break
                    kept.append(m)
                    total += m.tokens
                members, tokens = kept, total
            else:
                members = members[: self.cap_calls]
                tokens = sum(m.tokens for m in members)
            cands.append(
                _Candidate(ctype, members, tokens, min(m.enqueue_t for m in members))
            )
        return cands

    def _select(self, cands: List[_Candidate], now: float) -> Optional[_Candidate]:
        if not cands:
            return None
        return min(cands, key=lambda c: (-(now - c.oldest_t), _TYPE_RANK[c.ctype]))

    def poll(self, now: float) -> Tuple[Optional[List[PendingCall]], Optional[float]]:
        """Returns (members to dispatch, next wake time for timer policies)."""
        if self.busy:
            return None, None
        pol = self.policy
        if pol.kind == "eager":
            heads = [q.pending[0] for q in self.queues if q.pending]
            if not heads:
                return None, None
            call = min(heads, key=lambda m: (-m.queue.priority, m.seq))
            return [call], None
        cands = self._form_candidates()
        if not cands:
            return None, None
        if pol.kind == "adaptive":
            best = self._select(cands, now)
            return best.members, None
        if pol.kind == "k":
            ready = [c for c in cands if len(c.members) >= pol.k]
            if not ready:
                return None, None
            best = self._select(ready, now)
            return best.members[: pol.k], None
        if pol.kind == "t":
            t_s = pol.t_ms / 1000.0
            # readiness must mirror the wake arithmetic below: testing
            # now - oldest >= t_s can round under t_s at now == oldest + t_s,
            # which would re-request the same wake forever
            ready = [c for c in cands if c.oldest_t + t_s <= now]
            if ready:
                best = self._select(ready, now)
                return best.members, None
            wake = min(c.oldest_t for c in cands) + t_s
            return None, wake
        raise AssertionError(f"unknown policy {pol.kind}")


class Scheduler:
    """All lanes plus submission bookkeeping; owned by the kernel."""

    def __init__(self, policy: PolicySpec, cap_tokens: int, cap_calls: int,
                 model_names: List[str]):
        self.lanes: Dict[str, ModelLane] = {
            name: ModelLane(name, policy, cap_tokens, cap_calls) for name in model_names
        }
        self._seq = 0
        self._next_qid = 1
        self._next_batch = 1

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def create_queue(self, instance_id: int, model: str) -> CommandQueue:
        lane = self.lanes.get(model)
        if lane is None:
            raise InvalidQueue(f"no lane for model {model!r}")
        q = CommandQueue(self._next_qid, instance_id, model, self.next_seq())
        self._next_qid += 1
        lane.add_queue(q)
        return q

    def close_queue(self, q: CommandQueue) -> None:
        q.closed = True
        self.lanes[q.model].drop_queue(q)

    def submit(self, q: CommandQueue, call: PendingCall) -> None:
        if q.closed:
            raise InvalidQueue(f"queue {q.qid} is closed")
        q.pending.append(call)

    def cancel_queue_pending(self, q: CommandQueue) -> List[PendingCall]:
        dropped = q.pending
        q.pending = []
        return dropped

    def take_batch(self, lane: ModelLane, members: List[PendingCall], now: float) -> Batch:
        # members from one queue are always a prefix of its pending list
        per_queue: Dict[CommandQueue, int] = {}
        for m in members:
            per_queue[m.queue] = per_queue.get(m.queue, 0) + 1
        for q, n in per_queue.items():
            del q.pending[:n]
            q.inflight += n
        lane.busy = True
        b = Batch(
            batch_id=self._next_batch,
            model=lane.model,
            ctype=members[0].ctype,
            members=list(members),
            tokens=sum(m.tokens for m in members),
            formed_t=now,
        )
        self._next_batch += 1
        return b


class EventLog:
    """Append-only structured log; every record carries a virtual timestamp."""

    def __init__(self):
        self.records: List[dict] = []

    def emit(self, t: float, ev: str, **fields) -> None:
        rec = {"t": t, "ev": ev}
        rec.update(fields)
        self.records.append(rec)

    def filter(self, ev: str) -> List[dict]:
        return [r for r in self.records if r["ev"] == ev]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, separators=(",", ":")) for r in self.records)
