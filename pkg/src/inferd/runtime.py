"""The serving kernel: cooperative inferlet tasks over batched model calls.

One coordinator thread owns all state. Inferlets are plain coroutines that
await Completion objects; the kernel steps them with coro.send, so there is
no asyncio event loop and scheduling stays deterministic under the virtual
clock. The pump alternates three phases:

  1. drain the run queue until every task is parked on a completion
  2. offer each idle model lane a batch (formation sees the full burst of
     calls submitted during the drain, which is what makes fusion useful)
  3. advance the clock to the next timer and fire it

Model execution happens synchronously at dispatch through the backend
channel; what the timer at now + service_time models is when the *results*
become visible. Under the wall clock the request itself takes real time and
the completion fires immediately after.

Program order is preserved per command queue. Cross-queue ordering is not
guaranteed even within one inferlet; synchronize() first when reusing
handles across queues.
"""
from __future__ import annotations

import hashlib
import heapq
import queue as _queuemod
import time
import types
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .backends.base import Distribution
from .backends.host import BackendChannel, BackendHost, InProcessChannel
from .clock import Clock, VirtualClock, WallClock
from .config import ServerConfig
from .control import EventLog, PendingCall, Scheduler, CommandQueue
from .errors import (
    ClientGone,
    Denied,
    InvalidArgument,
    InvalidQueue,
    KernelError,
    LoadFailure,
    MailboxFull,
    MaskShapeMismatch,
    PoolExhausted,
    PositionOrder,
    SlotOverflow,
    TraitMissing,
    UnfilledEmbed,
    UnknownModel,
    UnknownProgram,
    UnknownTokenId,
    from_code,
)
from .frames import b64d, b64e
from .http import (
    HttpTransport,
    RealHttpTransport,
    SimulatedHttpTransport,
    check_allowlist,
)
from .resources import EMB, PAGE, ResourceHandle, ResourceManager
from . import guest as _guest

RUNNING = "running"
FINISHED = "finished"
FAILED = "failed"
TERMINATED = "terminated"


class _Cancelled(BaseException):
    """Raised inside a task being torn down; deliberately uncatchable by
    sandboxed code, whose builtins stop at Exception."""


class Completion:
    """Single-assignment result cell; the only thing inferlets may await."""

    __slots__ = ("kernel", "done", "value", "error", "info", "_tasks", "_cbs")

    def __init__(self, kernel: "Kernel"):
        self.kernel = kernel
        self.done = False
        self.value = None
        self.error: Optional[BaseException] = None
        self.info: dict = {}
        self._tasks: List["Task"] = []
        self._cbs: List[Callable] = []

    def resolve(self, value=None) -> None:
        if self.done:
            return
        self.done = True
        self.value = value
        self._fire()

    def fail(self, error: BaseException) -> None:
        if self.done:
            return
        self.done = True
        self.error = error
        self._fire()

    def _fire(self) -> None:
        tasks, self._tasks = self._tasks, []
        cbs, self._cbs = self._cbs, []
        for t in tasks:
            self.kernel.runnable.append(t)
        for cb in cbs:
            cb(self)

    def add_done_callback(self, cb: Callable) -> None:
        if self.done:
            cb(self)
        else:
            self._cbs.append(cb)

    def result(self):
        if not self.done:
            raise RuntimeError("completion not done")
        if self.error is not None:
            raise self.error
        return self.value

    def __await__(self):
        if not self.done:
            yield self
        if self.error is not None:
            raise self.error
        return self.value

    def __repr__(self):
        state = "done" if self.done else "pending"
        return f"<completion {state}>"


class Task:
    __slots__ = ("coro", "instance", "alive")

    def __init__(self, coro, instance: "InferletInstance"):
        self.coro = coro
        self.instance = instance
        self.alive = True


@dataclass(frozen=True)
class QueueHandle:
    """What inferlets hold instead of the scheduler's queue object."""

    owner: int
    qid: int
    model: str


@dataclass(frozen=True)
class SubHandle:
    owner: int
    topic: str
    sid: int


class ClientSink:
    """Delivery surface for one instance's client; implementations must not block."""

    def on_message(self, instance_id: int, seq: int, data: bytes) -> None:
        raise NotImplementedError

    def on_status(self, instance_id: int, status: str, detail: str) -> None:
        raise NotImplementedError


class MemorySink(ClientSink):
    def __init__(self):
        self.messages: List[bytes] = []
        self.statuses: List[Tuple[str, str]] = []

    def on_message(self, instance_id, seq, data):
        self.messages.append(data)

    def on_status(self, instance_id, status, detail):
        self.statuses.append((status, detail))

    @property
    def text(self) -> str:
        return b"".join(self.messages).decode("utf-8", "replace")


class InferletInstance:
    def __init__(self, iid: int, program: str, phash: str, args: List[str],
                 client: Optional[ClientSink], created_seq: int, created_t: float,
                 warm: bool, load_s: float):
        self.id = iid
        self.program = program
        self.phash = phash
        self.args = list(args)
        self.client = client
        self.client_connected = client is not None
        self.status = RUNNING
        self.detail = ""
        self.result: Optional[str] = None
        self.mailbox: deque = deque()
        self.recv_waiters: List[Completion] = []
        self.queues: List[CommandQueue] = []
        self.subs: List[SubHandle] = []
        self.outstanding = 0
        self.draining = False
        self.released = False
        self.task: Optional[Task] = None
        self.created_seq = created_seq
        self.created_t = created_t
        self.finished_t: Optional[float] = None
        self.warm = warm
        self.load_s = load_s
        self.send_seq = 0

    def info(self) -> dict:
        return {
            "instance": self.id,
            "program": self.program,
            "hash": self.phash,
            "status": self.status,
            "detail": self.detail,
            "warm": self.warm,
            "load_ms": round(self.load_s * 1000.0, 3),
            "created_t": self.created_t,
            "finished_t": self.finished_t,
        }


@dataclass
class _LoadedProgram:
    display: str
    phash: str
    kind: str                      # builtin | guest
    entry: object                  # coroutine function or code object
    warm: bool
    load_s: float


class ProgramStore:
    """Builtin registry plus uploaded-source cache keyed by content hash."""

    def __init__(self, builtins: Dict[str, Callable]):
        self.builtins = dict(builtins)
        self.builtin_hash = {
            hashlib.sha256(name.encode()).hexdigest(): name for name in self.builtins
        }
        self.uploads: Dict[str, bytes] = {}
        self.compiled: Dict[str, object] = {}

    def upload(self, data: bytes) -> Tuple[str, bool]:
        phash = hashlib.sha256(data).hexdigest()
        already = phash in self.uploads
        if not already:
            self.uploads[phash] = data
        return phash, already

    def names(self) -> List[str]:
        return sorted(self.builtins)

    def load(self, ref: str) -> _LoadedProgram:
        if ref in self.builtins:
            name = ref
        else:
            name = self.builtin_hash.get(ref)
        if name is not None:
            phash = hashlib.sha256(name.encode()).hexdigest()
            # builtins ship precompiled, so every launch is a cache hit
            return _LoadedProgram(name, phash, "builtin", self.builtins[name], True, 0.0)
        source = self.uploads.get(ref)
        if source is None:
            raise UnknownProgram(f"no program named or hashed {ref!r}")
        code = self.compiled.get(ref)
        if code is not None:
            return _LoadedProgram(f"upload:{ref[:12]}", ref, "guest", code, True, 0.0)
        t0 = time.perf_counter()
        code = _guest.compile_guest(source.decode("utf-8"), ref[:12])
        load_s = time.perf_counter() - t0
        self.compiled[ref] = code
        return _LoadedProgram(f"upload:{ref[:12]}", ref, "guest", code, False, load_s)


def _guest_surface(obj) -> types.SimpleNamespace:
    """Bound-method facade; guests cannot reach the backing object without
    dunder access, which the loader rejects."""
    return types.SimpleNamespace(
        **{n: getattr(obj, n) for n in dir(obj) if not n.startswith("_")}
    )


class HostApi:
    """Per-instance capability surface. Every mutating call validates against
    the projected resource mirror and fails fast at submission; arguments of
    queued calls are already reduced to physical ids here."""

    def __init__(self, kernel: "Kernel", inst: InferletInstance):
        self._k = kernel
        self._inst = inst

    # ------------------------------------------------------------ identity

    def instance_id(self) -> int:
        return self._inst.id

    def get_args(self) -> List[str]:
        return list(self._inst.args)

    def now(self) -> float:
        return self._k.now()

    def page_capacity(self) -> int:
        return self._k.config.page_capacity

    # -------------------------------------------------------------- models

    def models(self) -> List[dict]:
        return [dict(m) for m in self._k.model_info.values()]

    def model_traits(self, model: str) -> List[str]:
        return sorted(self._k._model(model)["traits"])

    # -------------------------------------------------------------- queues

    def create_queue(self, model: Optional[str] = None) -> QueueHandle:
        self._check()
        k = self._k
        model = model or k.default_model
        k._model(model)
        q = k.scheduler.create_queue(self._inst.id, model)
        k.queues[q.qid] = q
        self._inst.queues.append(q)
        return QueueHandle(self._inst.id, q.qid, model)

    def set_priority(self, qh: QueueHandle, priority: int) -> None:
        q = self._q(qh)
        q.priority = int(priority)

    def synchronize(self, qh: QueueHandle) -> Completion:
        q = self._q(qh)
        c = Completion(self._k)
        if q.quiescent():
            c.resolve(None)
        else:
            q.sync_waiters.append(c)
        return c

    # ----------------------------------------------------------- resources

    def alloc_kvpages(self, qh: QueueHandle, count: int) -> List[ResourceHandle]:
        q = self._q(qh)
        self._trait(qh.model, "alloc_kvpage")
        k = self._k
        k._reserve(self._inst, PAGE, count)
        handles = k.resources.alloc_pages(self._inst.id, count)
        phys = [k.resources.resolve_page(self._inst.id, h, writable=False)[0]
                for h in handles]
        self._submit(q, "alloc_kvpage",
                     {"pages": phys, "capacity": k.config.page_capacity},
                     wpages=frozenset(phys))
        return handles

    def alloc_embs(self, qh: QueueHandle, count: int) -> List[ResourceHandle]:
        q = self._q(qh)
        self._trait(qh.model, "alloc_emb")
        k = self._k
        k._reserve(self._inst, EMB, count)
        handles = k.resources.alloc_embs(self._inst.id, count)
        phys = [k.resources.resolve_emb(self._inst.id, h)[0] for h in handles]
        self._submit(q, "alloc_emb", {"embs": phys}, wembs=frozenset(phys))
        return handles

    def dealloc_kvpages(self, qh: QueueHandle, handles: Sequence[ResourceHandle]) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "dealloc_kvpage")
        phys = self._k.resources.schedule_dealloc(self._inst.id, handles, PAGE)
        return self._submit(q, "dealloc_kvpage", {"pages": phys},
                            wpages=frozenset(phys))

    def dealloc_embs(self, qh: QueueHandle, handles: Sequence[ResourceHandle]) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "dealloc_emb")
        phys = self._k.resources.schedule_dealloc(self._inst.id, handles, EMB)
        return self._submit(q, "dealloc_emb", {"embs": phys},
                            wembs=frozenset(phys))

    # ------------------------------------------------------- export/import

    def export_kvpages(self, handles: Sequence[ResourceHandle], name: str) -> None:
        self._check()
        self._k.resources.export_pages(self._inst.id, handles, name)
        self._k.events.emit(self._k.now(), "export", inferlet=self._inst.id,
                            name=name, pages=len(handles))

    def import_kvpages(self, name: str) -> List[ResourceHandle]:
        self._check()
        handles = self._k.resources.import_pages(self._inst.id, name)
        self._k.events.emit(self._k.now(), "import", inferlet=self._inst.id,
                            name=name, pages=len(handles))
        return handles

    def unexport_kvpages(self, name: str) -> None:
        self._check()
        self._k.resources.unexport_pages(self._inst.id, name)

    def list_exports(self) -> List[str]:
        return sorted(self._k.resources.registry)

    # ------------------------------------------------------------ compute

    def embed_text(self, qh: QueueHandle, tokens: Sequence[int],
                   positions: Sequence[int],
                   embs: Sequence[ResourceHandle]) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "embed_txt")
        k = self._k
        if not (len(tokens) == len(positions) == len(embs)):
            raise InvalidArgument("tokens, positions, embs must align")
        if not tokens:
            raise InvalidArgument("embed_text needs at least one token")
        vocab = k._model(qh.model)["vocab_size"]
        for t in tokens:
            if not 0 <= int(t) < vocab:
                raise UnknownTokenId(f"token id {t} outside vocabulary of {vocab}")
        for p in positions:
            if int(p) < 0:
                raise InvalidArgument(f"negative position {p}")
        phys = [k.resources.resolve_emb(self._inst.id, h)[0] for h in embs]
        for e, t, p in zip(phys, tokens, positions):
            k.resources.project_embed(e, int(t), int(p))
        return self._submit(
            q, "embed_txt",
            {"tokens": [int(t) for t in tokens],
             "positions": [int(p) for p in positions], "embs": phys},
            tokens_n=len(tokens), wembs=frozenset(phys))

    def forward(self, qh: QueueHandle, ikv: Sequence[ResourceHandle],
                iemb: Sequence[ResourceHandle], okv: Sequence[ResourceHandle],
                oemb: Sequence[ResourceHandle],
                mask: Optional[Sequence[Sequence[bool]]] = None) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "forward")
        k = self._k
        res = k.resources
        me = self._inst.id
        if not iemb:
            raise InvalidArgument("forward needs at least one input embed")
        if len(oemb) > len(iemb):
            raise InvalidArgument(
                f"{len(oemb)} output embeds for {len(iemb)} inputs")

        ikv_phys: List[int] = []
        ctx_positions: List[int] = []
        n_ctx = 0
        for h in ikv:
            phys, meta = res.resolve_page(me, h, writable=False)
            ikv_phys.append(phys)
            unmasked = meta.unmasked_positions()
            n_ctx += len(unmasked)
            ctx_positions.extend(unmasked)

        in_phys: List[int] = []
        positions: List[int] = []
        for h in iemb:
            phys, meta = res.resolve_emb(me, h)
            if meta.kind == "unfilled":
                raise UnfilledEmbed(f"{h!r} has not been written")
            if meta.kind != "input":
                raise InvalidArgument(f"{h!r} holds an output state, not an input")
            in_phys.append(phys)
            positions.append(meta.position)
        for a, b in zip(positions, positions[1:]):
            if b <= a:
                raise PositionOrder(f"input positions not strictly increasing: {positions}")
        ctx_set = set(ctx_positions)
        for p in positions:
            if p in ctx_set:
                raise PositionOrder(
                    f"input position {p} duplicates an unmasked context slot")

        okv_resolved: List[Tuple[int, object]] = []
        for h in okv:
            phys, meta = res.resolve_page(me, h, writable=True)
            okv_resolved.append((phys, meta))
        seen_f: Dict[int, int] = {}
        placements: List[Tuple[int, int]] = []
        for phys, meta in okv_resolved:
            fill = seen_f.setdefault(phys, meta.fill)
            take = min(meta.capacity - fill, len(iemb) - len(placements))
            for i in range(take):
                placements.append((phys, fill + i))
            seen_f[phys] = fill + take
            if len(placements) == len(iemb):
                break
        if len(placements) < len(iemb):
            raise SlotOverflow(
                f"{len(iemb)} tokens but only {len(placements)} free output slots")

        oemb_phys: List[int] = []
        for h in oemb:
            phys, _ = res.resolve_emb(me, h)
            oemb_phys.append(phys)

        wire_mask = None
        if mask is not None:
            if len(mask) != len(iemb):
                raise MaskShapeMismatch(
                    f"{len(mask)} mask rows for {len(iemb)} inputs")
            width = n_ctx + len(iemb)
            wire_mask = []
            for i, row in enumerate(mask):
                if len(row) != width:
                    raise MaskShapeMismatch(
                        f"mask row {i} has {len(row)} columns, expected {width}")
                wire_mask.append([bool(x) for x in row])

        # validation passed as a whole; apply projections atomically
        by_page: Dict[int, List[int]] = {}
        for (phys, _), p in zip(placements, positions):
            by_page.setdefault(phys, []).append(p)
        for phys, plist in by_page.items():
            res.project_append(phys, plist)
        base = len(iemb) - len(oemb)
        for j, phys in enumerate(oemb_phys):
            res.project_output(phys, positions[base + j])

        args = {
            "ikv": ikv_phys,
            "iemb": in_phys,
            "okv_slots": [[p, s] for p, s in placements],
            "oemb": oemb_phys,
        }
        if wire_mask is not None:
            args["mask"] = wire_mask
        wpos = {phys: max(pl) for phys, pl in by_page.items()}
        c = self._submit(
            q, "forward", args,
            tokens_n=len(iemb),
            wslots=frozenset(placements),
            wembs=frozenset(oemb_phys),
            rembs=frozenset(in_phys),
            rpages=frozenset(ikv_phys),
            max_write_pos=wpos,
            min_input_pos=positions[0],
        )
        c.info["placements"] = list(placements)
        return c

    def next_dist(self, qh: QueueHandle, emb: ResourceHandle,
                  k: Optional[int] = None) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "get_next_dist")
        kern = self._k
        kk = kern.config.top_k_default if k is None else int(k)
        if kk < 1:
            raise InvalidArgument("k must be >= 1")
        phys, meta = kern.resources.resolve_emb(self._inst.id, emb)
        if meta.kind == "unfilled":
            raise UnfilledEmbed(f"{emb!r} has not been written")
        if meta.kind != "output":
            raise InvalidArgument(f"{emb!r} holds an input token, not an output state")
        return self._submit(q, "get_next_dist", {"emb": phys, "k": kk},
                            rembs=frozenset([phys]))

    def mask_kvpage(self, qh: QueueHandle, page: ResourceHandle,
                    mask: Sequence[bool]) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "mask_kvpage")
        res = self._k.resources
        phys, meta = res.resolve_page(self._inst.id, page, writable=True)
        if len(mask) != meta.fill:
            raise InvalidArgument(
                f"mask length {len(mask)} != page fill {meta.fill}")
        bits = [bool(x) for x in mask]
        res.project_mask(phys, bits)
        return self._submit(q, "mask_kvpage", {"page": phys, "mask": bits},
                            wpages=frozenset([phys]))

    def copy_kvpage(self, qh: QueueHandle, src: ResourceHandle,
                    dst: ResourceHandle, src_start: int, dst_start: int,
                    n: int) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "copy_kvpage")
        res = self._k.resources
        sphys, smeta = res.resolve_page(self._inst.id, src, writable=False)
        dphys, dmeta = res.resolve_page(self._inst.id, dst, writable=True)
        if n < 0 or src_start < 0 or dst_start < 0:
            raise InvalidArgument("copy range must be non-negative")
        if src_start + n > smeta.fill:
            raise InvalidArgument(
                f"source range [{src_start}, {src_start + n}) exceeds fill {smeta.fill}")
        if dst_start > dmeta.fill or dst_start + n > dmeta.capacity:
            raise InvalidArgument("destination range not dense or beyond capacity")
        res.project_copy(sphys, src_start, dphys, dst_start, n)
        return self._submit(
            q, "copy_kvpage",
            {"src": sphys, "dst": dphys, "src_start": src_start,
             "dst_start": dst_start, "n": n},
            rpages=frozenset([sphys]), wpages=frozenset([dphys]))

    # ----------------------------------------------------------- tokenizer

    def tokenize(self, qh: QueueHandle, data) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "tokenize")
        if isinstance(data, str):
            data = data.encode("utf-8")
        return self._submit(q, "tokenize", {"text_b64": b64e(bytes(data))})

    def detokenize(self, qh: QueueHandle, ids: Sequence[int]) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "detokenize")
        return self._submit(q, "detokenize", {"ids": [int(i) for i in ids]})

    def vocabs(self, qh: QueueHandle) -> Completion:
        q = self._q(qh)
        self._trait(qh.model, "get_vocabs")
        return self._submit(q, "get_vocabs", {})

    # ------------------------------------------------------------- client

    def send(self, data) -> None:
        self._check()
        if isinstance(data, str):
            data = data.encode("utf-8")
        self._k._deliver_to_client(self._inst, bytes(data))

    def receive(self) -> Completion:
        self._check()
        inst = self._inst
        c = Completion(self._k)
        if inst.mailbox:
            c.resolve(inst.mailbox.popleft())
        elif not inst.client_connected:
            c.fail(ClientGone("no client attached"))
        else:
            inst.recv_waiters.append(c)
        return c

    # ------------------------------------------------------------- pub/sub

    def broadcast(self, topic: str, data) -> int:
        self._check()
        if isinstance(data, str):
            data = data.encode("utf-8")
        return self._k._broadcast(topic, bytes(data))

    def subscribe(self, topic: str) -> SubHandle:
        self._check()
        return self._k._subscribe(self._inst, str(topic))

    def next_broadcast(self, sh: SubHandle) -> Completion:
        self._check()
        return self._k._sub_next(self._inst, sh)

    def unsubscribe(self, sh: SubHandle) -> None:
        self._k._unsubscribe(self._inst, sh)

    # ---------------------------------------------------------------- http

    def http_get(self, url: str, timeout: Optional[float] = None) -> Completion:
        self._check()
        return self._k.http_request(self._inst, "GET", url, None, timeout)

    def http_post(self, url: str, body, timeout: Optional[float] = None) -> Completion:
        self._check()
        if isinstance(body, str):
            body = body.encode("utf-8")
        return self._k.http_request(self._inst, "POST", url, bytes(body), timeout)

    # --------------------------------------------------------------- misc

    def sleep(self, seconds: float) -> Completion:
        self._check()
        c = Completion(self._k)
        self._k.at(self._k.now() + max(0.0, float(seconds)), lambda: c.resolve(None))
        return c

    # ------------------------------------------------------------ plumbing

    def _check(self) -> None:
        if self._inst.status != RUNNING:
            raise _Cancelled()

    def _q(self, qh: QueueHandle) -> CommandQueue:
        self._check()
        if not isinstance(qh, QueueHandle) or qh.owner != self._inst.id:
            raise InvalidQueue("queue handle does not belong to this program")
        q = self._k.queues.get(qh.qid)
        if q is None or q.closed:
            raise InvalidQueue(f"queue {qh.qid} is closed")
        return q

    def _trait(self, model: str, ctype: str) -> None:
        self._k._require_trait(model, ctype)

    def _submit(self, q: CommandQueue, ctype: str, args: dict, *,
                tokens_n: int = 1, wslots=frozenset(), wpages=frozenset(),
                wembs=frozenset(), rembs=frozenset(), rpages=frozenset(),
                max_write_pos=None, min_input_pos=None) -> Completion:
        k = self._k
        c = Completion(k)
        call = PendingCall(
            seq=k.scheduler.next_seq(), ctype=ctype, args=args, queue=q,
            enqueue_t=k.now(), completion=c, tokens=tokens_n,
            wslots=wslots, wpages=wpages, wembs=wembs, rembs=rembs,
            rpages=rpages, max_write_pos=max_write_pos or {},
            min_input_pos=min_input_pos)
        k.scheduler.submit(q, call)
        self._inst.outstanding += 1
        k.events.emit(k.now(), "submit", inferlet=self._inst.id, q=q.qid,
                      ctype=ctype, tokens=tokens_n, seq=call.seq)
        return c


class _Topic:
    def __init__(self):
        self.subs: Dict[int, "_Subscriber"] = {}


class _Subscriber:
    def __init__(self, inst: InferletInstance):
        self.inst = inst
        self.buffer: deque = deque()
        self.waiters: List[Completion] = []


class Kernel:
    """Coordinator: owns tasks, timers, queues, resources, and the backend."""

    def __init__(self, config: Optional[ServerConfig] = None, *,
                 clock: Optional[Clock] = None,
                 channel: Optional[BackendChannel] = None,
                 http_transport: Optional[HttpTransport] = None,
                 builtins: Optional[Dict[str, Callable]] = None):
        self.config = config or ServerConfig()
        self.clock = clock or VirtualClock()
        self.virtual = isinstance(self.clock, VirtualClock)
        self.backend = channel or InProcessChannel(BackendHost(self.config))

        resp = self.backend.request({"op": "descriptors"})
        if not resp.get("ok"):
            raise UnknownModel(f"backend refused descriptor query: {resp}")
        self.model_info: Dict[str, dict] = {}
        for m in resp["models"]:
            info = dict(m)
            info["traits"] = frozenset(m["traits"])
            self.model_info[m["name"]] = info
        self.default_model = self.config.models[0]["name"]

        self.resources = ResourceManager(
            self.config.kv_pages, self.config.embeds, self.config.page_capacity)
        self.scheduler = Scheduler(
            self.config.policy, self.config.max_batch_tokens,
            self.config.max_batch_calls, list(self.model_info))
        for name, lane in self.scheduler.lanes.items():
            lane.cap_tokens = min(
                self.config.max_batch_tokens, self.model_info[name]["max_batch_tokens"])
        self.events = EventLog()

        if builtins is None:
            from .inferlib.builtins import BUILTINS as builtins
        self.programs = ProgramStore(builtins)

        if http_transport is None:
            http_transport = (SimulatedHttpTransport() if self.virtual
                              else RealHttpTransport())
        self.http = http_transport

        self.instances: Dict[int, InferletInstance] = {}
        self.queues: Dict[int, CommandQueue] = {}
        self.topics: Dict[str, _Topic] = {}
        self.runnable: deque = deque()
        self._timers: List[Tuple[float, int, Optional[Callable]]] = []
        self._timer_seq = 0
        self._lane_wakes: Dict[str, float] = {}
        self.inbox: _queuemod.Queue = _queuemod.Queue()
        self._next_instance = 1
        self._next_sub = 1
        self._current_task: Optional[Task] = None
        self._stopped = False
        self._closing = False

    # ------------------------------------------------------------- helpers

    def now(self) -> float:
        return self.clock.now()

    def at(self, t: float, fn: Optional[Callable]) -> None:
        self._timer_seq += 1
        heapq.heappush(self._timers, (t, self._timer_seq, fn))

    def post(self, fn: Callable) -> None:
        """Thread-safe handoff into the wall-clock loop."""
        self.inbox.put(fn)

    def _model(self, name: str) -> dict:
        info = self.model_info.get(name)
        if info is None:
            raise UnknownModel(f"no model named {name!r}")
        return info

    def _require_trait(self, model: str, ctype: str) -> None:
        from .backends.base import OP_TRAIT

        needed = OP_TRAIT[ctype]
        if needed not in self._model(model)["traits"]:
            raise TraitMissing(f"model {model!r} lacks {needed} for {ctype}")

    # ------------------------------------------------------------ programs

    def upload_program(self, data: bytes) -> Tuple[str, bool]:
        return self.programs.upload(data)

    def launch(self, ref: str, args: Optional[Sequence[str]] = None,
               client: Optional[ClientSink] = None) -> InferletInstance:
        if self._closing:
            raise Denied("server is shutting down")
        prog = self.programs.load(ref)
        iid = self._next_instance
        self._next_instance += 1
        inst = InferletInstance(
            iid, prog.display, prog.phash, list(args or []), client,
            created_seq=self.scheduler.next_seq(), created_t=self.now(),
            warm=prog.warm, load_s=prog.load_s)
        self.resources.create_space(iid)
        self.instances[iid] = inst
        api = HostApi(self, inst)
        try:
            if prog.kind == "builtin":
                coro = prog.entry(api)
                if not hasattr(coro, "send"):
                    raise LoadFailure(f"builtin {prog.display} is not a coroutine function")
            else:
                from .inferlib import GUEST_EXPORTS

                def emit_print(*parts):
                    api.send(" ".join(str(p) for p in parts) + "\n")

                coro = _guest.instantiate(
                    prog.entry, _guest_surface(api),
                    types.SimpleNamespace(**GUEST_EXPORTS), emit_print)
        except KernelError:
            self.resources.release_instance(iid)
            del self.instances[iid]
            raise
        inst.task = Task(coro, inst)
        self.runnable.append(inst.task)
        self.events.emit(self.now(), "launch", inferlet=iid,
                         program=prog.display, warm=prog.warm)
        return inst

    # ----------------------------------------------------------- lifecycle

    def terminate(self, iid: int, reason: str = "terminated") -> bool:
        inst = self.instances.get(iid)
        if inst is None:
            raise InvalidArgument(f"no instance {iid}")
        if inst.status != RUNNING:
            return False
        self._finish(inst, TERMINATED, reason)
        if inst.task is not None and inst.task is not self._current_task:
            try:
                inst.task.coro.close()
            except BaseException:
                pass
        return True

    def _finish(self, inst: InferletInstance, status: str, detail: str = "",
                result=None) -> None:
        if inst.status != RUNNING:
            return
        inst.status = status
        inst.detail = detail
        inst.finished_t = self.now()
        if inst.task is not None:
            inst.task.alive = False
        if isinstance(result, str):
            inst.result = result
        for sh in list(inst.subs):
            self._unsubscribe(inst, sh)
        for w in inst.recv_waiters:
            w.fail(ClientGone("program exited"))
        inst.recv_waiters = []
        self.events.emit(self.now(), "exit", inferlet=inst.id, status=status,
                         detail=detail)

        if status == FINISHED:
            # let queued work drain so its effects stay observable in order
            if inst.outstanding > 0:
                inst.draining = True
            else:
                self._release(inst)
        else:
            for q in inst.queues:
                for call in self.scheduler.cancel_queue_pending(q):
                    inst.outstanding -= 1
                    call.completion.fail(_Cancelled())
            self._release(inst)

        if inst.client is not None:
            # a broken client callback must not poison kernel bookkeeping
            try:
                inst.client.on_status(inst.id, status, detail or (inst.result or ""))
            except Exception:
                pass

    def _release(self, inst: InferletInstance) -> None:
        if inst.released:
            return
        inst.released = True
        inst.draining = False
        for q in inst.queues:
            if not q.closed:
                self.scheduler.close_queue(q)
            for w in q.sync_waiters:
                w.resolve(None)
            q.sync_waiters = []
        self.resources.release_instance(inst.id)

    # ---------------------------------------------------------- step/drain

    def _step(self, task: Task) -> None:
        if not task.alive:
            return
        inst = task.instance
        self._current_task = task
        try:
            poke: Optional[BaseException] = None
            while True:
                if poke is None:
                    y = task.coro.send(None)
                else:
                    y, poke = task.coro.throw(poke), None
                if isinstance(y, Completion):
                    if y.done:
                        continue  # resume immediately; __await__ re-checks
                    y._tasks.append(task)
                    return
                poke = TypeError(f"inferlets may only await completions, got {y!r}")
        except StopIteration as stop:
            self._finish(inst, FINISHED, result=stop.value)
        except _Cancelled:
            pass  # bookkeeping already done by whoever cancelled us
        except KernelError as e:
            self._finish(inst, FAILED, detail=f"{e.code}: {e.message}")
        except Exception as e:
            self._finish(inst, FAILED, detail=repr(e))
        finally:
            self._current_task = None

    def _drain(self) -> None:
        while self.runnable:
            self._step(self.runnable.popleft())

    # ------------------------------------------------------------ dispatch

    def _try_dispatch(self) -> bool:
        progressed = False
        for lane in self.scheduler.lanes.values():
            while not lane.busy:
                members, wake = lane.poll(self.now())
                if members is None:
                    if wake is not None and self._lane_wakes.get(lane.model) != wake:
                        self._lane_wakes[lane.model] = wake
                        self.at(wake, lambda m=lane.model: self._lane_wakes.pop(m, None))
                    break
                batch = self.scheduler.take_batch(lane, members, self.now())
                self._execute(lane, batch)
                progressed = True
        return progressed

    def _execute(self, lane, batch) -> None:
        oldest = min(m.enqueue_t for m in batch.members)
        self.events.emit(self.now(), "dispatch", model=lane.model,
                         batch=batch.batch_id, ctype=batch.ctype,
                         size=batch.size, tokens=batch.tokens,
                         wait_s=self.now() - oldest)
        resp = self.backend.request({
            "op": "batch", "model": lane.model, "ctype": batch.ctype,
            "calls": [m.args for m in batch.members]})
        if resp.get("ok"):
            results = resp["results"]
        else:
            results = [{"err": resp.get("err", "network_error"),
                        "msg": resp.get("msg", "backend failure")}] * batch.size
        service = (self.config.service_c0_ms
                   + self.config.service_c1_ms * batch.tokens) / 1000.0
        done_t = self.now() + service if self.virtual else self.now()
        self.at(done_t, lambda: self._complete(lane, batch, results, service))

    def _complete(self, lane, batch, results, service: float) -> None:
        lane.busy = False
        self.events.emit(self.now(), "complete", model=lane.model,
                         batch=batch.batch_id, ctype=batch.ctype,
                         size=batch.size, tokens=batch.tokens, service_s=service)
        for m, r in zip(batch.members, results):
            q = m.queue
            q.inflight -= 1
            inst = self.instances.get(q.instance_id)
            if m.ctype == "dealloc_kvpage":
                self.resources.commit_release(q.instance_id, PAGE, m.args["pages"])
            elif m.ctype == "dealloc_emb":
                self.resources.commit_release(q.instance_id, EMB, m.args["embs"])
            if "err" in r:
                m.completion.fail(from_code(r["err"], r.get("msg", "")))
            else:
                m.completion.resolve(self._decode(m.ctype, r.get("ok")))
            if inst is not None:
                inst.outstanding -= 1
                if q.sync_waiters and q.quiescent():
                    for w in q.sync_waiters:
                        w.resolve(None)
                    q.sync_waiters = []
                if inst.draining and inst.outstanding == 0:
                    self._release(inst)

    @staticmethod
    def _decode(ctype: str, ok):
        if ctype == "get_next_dist":
            return Distribution.from_wire(ok)
        if ctype == "tokenize":
            return list(ok)
        if ctype == "detokenize":
            return b64d(ok)
        if ctype == "get_vocabs":
            return [b64d(x) for x in ok]
        return None

    # --------------------------------------------------------- arbitration

    def _reserve(self, inst: InferletInstance, kind: str, count: int) -> None:
        """First-come-first-served: on contention, newest programs are
        evicted one at a time until the request fits. The requester itself is
        fair game when it is the newest, unless it is the only one left."""
        free = (self.resources.free_page_count if kind == PAGE
                else self.resources.free_emb_count)
        if count < 1:
            raise InvalidArgument("count must be >= 1")
        total = self.resources.total_pages if kind == PAGE else self.resources.total_embs
        if count > total:
            raise PoolExhausted(f"{count} {kind}s exceeds the pool of {total}")
        while free() < count:
            running = [i for i in self.instances.values() if i.status == RUNNING]
            victim = max(running, key=lambda i: i.created_seq)
            if victim is inst and len(running) == 1:
                raise PoolExhausted(
                    f"need {count} {kind}s, {free()} free, nothing left to evict")
            self.events.emit(self.now(), "arbitrate", victim=victim.id,
                             requester=inst.id, kind=kind, need=count)
            if victim is inst:
                self._finish(inst, TERMINATED, "evicted by resource arbitration")
                raise _Cancelled()
            self.terminate(victim.id, "evicted by resource arbitration")

    # ------------------------------------------------------ client surface

    def _deliver_to_client(self, inst: InferletInstance, data: bytes) -> None:
        inst.send_seq += 1
        self.events.emit(self.now(), "send", inferlet=inst.id,
                         seq=inst.send_seq, n=len(data))
        if inst.client is not None and inst.client_connected:
            try:
                inst.client.on_message(inst.id, inst.send_seq, data)
            except Exception:
                pass

    def deliver(self, iid: int, data: bytes) -> None:
        """Client-to-program message; called by the service layer."""
        inst = self.instances.get(iid)
        if inst is None:
            raise InvalidArgument(f"no instance {iid}")
        if inst.status != RUNNING:
            raise InvalidArgument(f"instance {iid} is {inst.status}")
        if inst.recv_waiters:
            inst.recv_waiters.pop(0).resolve(bytes(data))
            return
        if len(inst.mailbox) >= self.config.mailbox_capacity:
            raise MailboxFull(
                f"mailbox holds {self.config.mailbox_capacity} messages")
        inst.mailbox.append(bytes(data))

    def attach_client(self, iid: int, sink: Optional[ClientSink]) -> None:
        inst = self.instances.get(iid)
        if inst is None:
            raise InvalidArgument(f"no instance {iid}")
        inst.client = sink
        inst.client_connected = sink is not None
        if sink is None:
            for w in inst.recv_waiters:
                w.fail(ClientGone("client disconnected"))
            inst.recv_waiters = []

    # -------------------------------------------------------------- pubsub

    def _broadcast(self, topic: str, data: bytes) -> int:
        t = self.topics.get(topic)
        if t is None:
            return 0
        for sub in t.subs.values():
            sub.buffer.append(data)
            while sub.waiters and sub.buffer:
                sub.waiters.pop(0).resolve(sub.buffer.popleft())
        return len(t.subs)

    def _subscribe(self, inst: InferletInstance, topic: str) -> SubHandle:
        t = self.topics.setdefault(topic, _Topic())
        sid = self._next_sub
        self._next_sub += 1
        t.subs[sid] = _Subscriber(inst)
        sh = SubHandle(inst.id, topic, sid)
        inst.subs.append(sh)
        return sh

    def _sub_next(self, inst: InferletInstance, sh: SubHandle) -> Completion:
        t = self.topics.get(sh.topic)
        sub = t.subs.get(sh.sid) if t else None
        if sub is None or sh.owner != inst.id:
            raise InvalidArgument("not subscribed")
        c = Completion(self)
        if sub.buffer:
            c.resolve(sub.buffer.popleft())
        else:
            sub.waiters.append(c)
        return c

    def _unsubscribe(self, inst: InferletInstance, sh: SubHandle) -> None:
        t = self.topics.get(sh.topic)
        if t is not None:
            t.subs.pop(sh.sid, None)
            if not t.subs:
                self.topics.pop(sh.topic, None)
        if sh in inst.subs:
            inst.subs.remove(sh)

    # ---------------------------------------------------------------- http

    def http_request(self, inst: InferletInstance, method: str, url: str,
                     body: Optional[bytes], timeout: Optional[float]) -> Completion:
        check_allowlist(url, self.config.http_allowlist)
        timeout = self.config.http_timeout_s if timeout is None else float(timeout)
        c = Completion(self)
        self.events.emit(self.now(), "http", inferlet=inst.id, method=method,
                         url=url)
        self.http.issue(self, method, url, body, timeout, c)
        return c

    # ---------------------------------------------------------------- pump

    def run_until_idle(self, max_virtual_s: Optional[float] = None) -> None:
        """Virtual-clock driver: run until nothing can make progress."""
        horizon = None if max_virtual_s is None else self.now() + max_virtual_s
        while True:
            self._drain()
            if self._try_dispatch():
                continue
            if self.runnable:
                continue
            if not self._timers:
                return
            t, s, fn = heapq.heappop(self._timers)
            if horizon is not None and t > horizon:
                heapq.heappush(self._timers, (t, s, fn))
                return
            self.clock.advance_to(t)
            if fn is not None:
                fn()

    def run_forever(self) -> None:
        """Wall-clock driver: also consumes the cross-thread inbox."""
        if self.virtual:
            raise InvalidArgument("run_forever needs a wall clock; "
                                  "use run_until_idle on a virtual clock")
        self._stopped = False
        while not self._stopped:
            self._drain()
            self._try_dispatch()
            if self.runnable:
                continue
            fired = False
            while self._timers and self._timers[0][0] <= self.now():
                _, _, fn = heapq.heappop(self._timers)
                if fn is not None:
                    fn()
                fired = True
            if fired or self.runnable:
                continue
            wait = 0.05
            if self._timers:
                wait = min(wait, max(0.0, self._timers[0][0] - self.now()))
            try:
                fn = self.inbox.get(timeout=wait)
            except _queuemod.Empty:
                continue
            if fn is not None:
                fn()

    def stop(self) -> None:
        self._stopped = True
        self.inbox.put(None)

    # ------------------------------------------------------------- queries

    def list_instances(self) -> List[dict]:
        return [inst.info() for inst in self.instances.values()]

    def list_models(self) -> List[dict]:
        out = []
        for info in self.model_info.values():
            d = dict(info)
            d["traits"] = sorted(d["traits"])
            out.append(d)
        return out

    def dump_page(self, model: str, phys: int) -> dict:
        resp = self.backend.request({"op": "dump_page", "model": model, "page": phys})
        if not resp.get("ok"):
            raise from_code(resp.get("err", "invalid_argument"), resp.get("msg", ""))
        return resp["page"]

    def dump_emb(self, model: str, phys: int) -> dict:
        resp = self.backend.request({"op": "dump_emb", "model": model, "emb": phys})
        if not resp.get("ok"):
            raise from_code(resp.get("err", "invalid_argument"), resp.get("msg", ""))
        return resp["emb"]

    def shutdown(self) -> None:
        self._closing = True
        for inst in list(self.instances.values()):
            if inst.status == RUNNING:
                self.terminate(inst.id, "server shutdown")
        self.resources.clear_registry()
        try:
            self.backend.request({"op": "shutdown"})
        except KernelError:
            pass
        self.backend.close()
