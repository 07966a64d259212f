"""Inference-layer host and the control<->backend message boundary.

The control layer never touches the arena directly: every queued call crosses
this boundary as a length-prefixed JSON frame, whether the backend runs
in-process (frames still encoded and decoded, so the path is always
exercised) or as a child process connected over pipes.

Boundary schema (one frame per request, one per response):
  {"op": "batch", "model": m, "ctype": t, "calls": [args, ...]}
      -> {"ok": true, "results": [{"ok": value} | {"err": code, "msg": s}]}
  {"op": "descriptors"}            -> {"ok": true, "models": [descriptor...]}
  {"op": "dump_page", "model": m, "page": pid}   -> {"ok": true, "page": {...}}
  {"op": "dump_emb", "model": m, "emb": eid}     -> {"ok": true, "emb": {...}}
  {"op": "shutdown"}               -> {"ok": true}
Errors at the request level: {"ok": false, "err": code, "msg": s}.
"""
from __future__ import annotations

import io
import subprocess
import sys
import threading
from typing import Dict, Optional

from ..config import ServerConfig
from ..errors import InvalidArgument, KernelError, UnknownModel
from ..frames import encode_frame, read_frame
from .base import Arena, Backend
from .mock import MockHashModel
from .transformer import ToyTransformer

MODEL_KINDS = {
    MockHashModel.name: MockHashModel,
    ToyTransformer.name: ToyTransformer,
}


def build_backends(config: ServerConfig, arena: Arena) -> Dict[str, Backend]:
    backends: Dict[str, Backend] = {}
    for entry in config.models:
        entry = dict(entry)
        name = entry.pop("name", None)
        if name not in MODEL_KINDS:
            raise UnknownModel(f"no model kind named {name!r}")
        if name in backends:
            raise InvalidArgument(f"model {name!r} configured twice")
        backends[name] = MODEL_KINDS[name](arena, **entry)
    if not backends:
        raise InvalidArgument("config declares no models")
    return backends


class BackendHost:
    """Owns the arena and executes batches serially, one at a time."""

    def __init__(self, config: ServerConfig):
        self.arena = Arena()
        self.backends = build_backends(config, self.arena)

    def handle(self, payload: dict) -> dict:
        op = payload.get("op")
        try:
            if op == "batch":
                return self._batch(payload)
            if op == "descriptors":
                return {
                    "ok": True,
                    "models": [b.descriptor.to_jsonable() for b in self.backends.values()],
                }
            if op == "dump_page":
                backend = self._backend(payload["model"])
                return {"ok": True, "page": backend.dump_page(payload["page"])}
            if op == "dump_emb":
                backend = self._backend(payload["model"])
                return {"ok": True, "emb": backend.dump_emb(payload["emb"])}
            if op == "shutdown":
                return {"ok": True, "bye": True}
        except KernelError as e:
            return {"ok": False, "err": e.code, "msg": e.message}
        return {"ok": False, "err": "invalid_argument", "msg": f"unknown backend op {op!r}"}

    def _backend(self, name: str) -> Backend:
        try:
            return self.backends[name]
        except KeyError:
            raise UnknownModel(f"no model named {name!r}")

    def _batch(self, payload: dict) -> dict:
        backend = self._backend(payload["model"])
        ctype = payload["ctype"]
        results = []
        for args in payload["calls"]:
            try:
                value = backend.execute(ctype, args)
                results.append({"ok": value})
            except KernelError as e:
                # a failing call must not poison its siblings
                results.append({"err": e.code, "msg": e.message})
            except Exception as e:
                # malformed args crossing the frame boundary count too
                results.append({"err": "invalid_argument",
                                "msg": f"{type(e).__name__}: {e}"})
        return {"ok": True, "results": results}

    def handle_frame(self, frame: bytes) -> bytes:
        payload = read_frame(io.BytesIO(frame))
        return encode_frame(self.handle(payload))


class BackendChannel:
    """Request/response pipe from the control layer to an inference host."""

    def request(self, payload: dict) -> dict:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InProcessChannel(BackendChannel):
    """Same-process host behind a full codec round-trip."""

    def __init__(self, host: BackendHost):
        self.host = host

    def request(self, payload: dict) -> dict:
        resp = self.host.handle_frame(encode_frame(payload))
        return read_frame(io.BytesIO(resp))


class SubprocessChannel(BackendChannel):
    """Child-process host over stdin/stdout pipes."""

    def __init__(self, config: ServerConfig):
        self.proc = subprocess.Popen(
            [sys.executable, "-c",
             "import sys; from inferd.backends.host import _child_main; "
             "sys.exit(_child_main())"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )
        self._lock = threading.Lock()
        self.request({"op": "init", "config": config.to_dict()})

    def request(self, payload: dict) -> dict:
        with self._lock:
            self.proc.stdin.write(encode_frame(payload))
            self.proc.stdin.flush()
            resp = read_frame(self.proc.stdout)
        if resp is None:
            raise KernelError("backend process closed its pipe")
        return resp

    def close(self) -> None:
        try:
            self.request({"op": "shutdown"})
        except Exception:
            pass
        self.proc.stdin.close()
        self.proc.wait(timeout=10)


def _child_main() -> int:
    """Entry point for the split backend process."""
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    first = read_frame(stdin)
    if first is None or first.get("op") != "init":
        stdout.write(encode_frame({"ok": False, "err": "invalid_argument", "msg": "expected init"}))
        return 1
    host = BackendHost(ServerConfig.from_dict(first["config"]))
    stdout.write(encode_frame({"ok": True}))
    stdout.flush()
    while True:
        payload = read_frame(stdin)
        if payload is None:
            return 0
        resp = host.handle(payload)
        stdout.write(encode_frame(resp))
        stdout.flush()
        if payload.get("op") == "shutdown":
            return 0


if __name__ == "__main__":
    sys.exit(_child_main())
