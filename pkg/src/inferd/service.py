"""Client-facing service: framed JSON ops over TCP, plus an embeddable core.

ServiceCore is transport-free so tests can drive a virtual-clock kernel with
the exact frames a socket client would send; Server wraps it with real
sockets for the CLI. Threading model: one kernel thread runs the event loop,
each connection gets a reader thread that posts parsed requests onto the
kernel inbox, and all writes to a socket go through that connection's lock
(responses and pushes alike). The kernel thread never blocks on a client.

Requests carry an optional "id" echoed in the response. Pushes have no id:
  {"op": "msg", "instance": i, "seq": n, "data_b64": ...}
  {"op": "status", "instance": i, "status": s, "detail": d}
"""
from __future__ import annotations

import socket
import threading
from typing import Dict, Optional, Set

from .clock import WallClock
from .config import ServerConfig
from .errors import FrameError, InvalidArgument, KernelError
from .frames import b64d, b64e, encode_frame, read_frame
from .runtime import ClientSink, Kernel


class ServiceCore:
    """Op dispatch against one kernel; transport supplies the client sink."""

    def __init__(self, kernel: Kernel):
        self.kernel = kernel

    def handle(self, req: dict, client: Optional[ClientSink] = None) -> dict:
        rid = req.get("id")
        try:
            out = self._dispatch(req, client)
        except KernelError as e:
            out = {"ok": False, "err": e.code, "msg": e.message}
        if rid is not None:
            out["id"] = rid
        return out

    def _dispatch(self, req: dict, client) -> dict:
        op = req.get("op")
        k = self.kernel
        if op == "upload_program":
            phash, cached = k.upload_program(b64d(req["data_b64"]))
            return {"ok": True, "hash": phash, "cached": cached}
        if op == "launch":
            inst = k.launch(req["program"], req.get("args") or [], client)
            return {"ok": True, "instance": inst.id, "warm": inst.warm}
        if op == "send":
            k.deliver(int(req["instance"]), b64d(req["data_b64"]))
            return {"ok": True}
        if op == "stream":
            iid = int(req["instance"])
            inst = k.instances.get(iid)
            if inst is None:
                raise InvalidArgument(f"no instance {iid}")
            k.attach_client(iid, client)
            return {"ok": True, "status": inst.status}
        if op == "terminate":
            return {"ok": True,
                    "terminated": k.terminate(int(req["instance"]), "client request")}
        if op == "query_models":
            return {"ok": True, "models": k.list_models(),
                    "policy": k.config.policy.describe()}
        if op == "query_instances":
            return {"ok": True, "instances": k.list_instances()}
        if op == "query_programs":
            return {"ok": True, "programs": k.programs.names()}
        raise InvalidArgument(f"unknown op {op!r}")


class _Conn(ClientSink):
    """One client connection; owns the write lock and its attached instances."""

    def __init__(self, server: "Server", sock: socket.socket):
        self.server = server
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.wlock = threading.Lock()
        self.dead = False
        self.instances: Set[int] = set()

    # ---- ClientSink (called on the kernel thread)

    def on_message(self, iid: int, seq: int, data: bytes) -> None:
        self._push({"op": "msg", "instance": iid, "seq": seq,
                    "data_b64": b64e(data)})

    def on_status(self, iid: int, status: str, detail: str) -> None:
        self._push({"op": "status", "instance": iid, "status": status,
                    "detail": detail})

    def _push(self, payload: dict) -> None:
        if self.dead:
            return
        try:
            with self.wlock:
                self.sock.sendall(encode_frame(payload))
        except OSError:
            self.dead = True

    # ---- reader thread

    def run(self) -> None:
        try:
            while True:
                try:
                    req = read_frame(self.rfile)
                except FrameError as e:
                    self._push({"ok": False, "err": "frame_error", "msg": str(e)})
                    break
                if req is None:
                    break
                self.server.kernel.post(lambda r=req: self._serve(r))
        finally:
            self.server.kernel.post(self._detach_all)
            # the makefile holds its own reference to the socket, so close
            # both and shut the connection down to get the FIN out
            for final in (lambda: self.sock.shutdown(socket.SHUT_RDWR),
                          self.rfile.close, self.sock.close):
                try:
                    final()
                except OSError:
                    pass

    # ---- kernel thread

    def _serve(self, req: dict) -> None:
        resp = self.server.core.handle(req, self)
        if resp.get("ok") and req.get("op") in ("launch", "stream"):
            self.instances.add(resp.get("instance", req.get("instance")))
        self._push(resp)

    def _detach_all(self) -> None:
        self.dead = True
        k = self.server.kernel
        for iid in self.instances:
            inst = k.instances.get(iid)
            if inst is not None and inst.client is self:
                k.attach_client(iid, None)


class Server:
    """TCP front plus the kernel thread. start() returns once listening."""

    def __init__(self, config: ServerConfig, kernel: Optional[Kernel] = None):
        self.config = config
        self.kernel = kernel if kernel is not None else Kernel(
            config, clock=WallClock())
        self.core = ServiceCore(self.kernel)
        self.listener: Optional[socket.socket] = None
        self._threads = []
        self._stopping = False

    @property
    def addr(self):
        return self.listener.getsockname() if self.listener else None

    def start(self) -> None:
        host, port = self.config.listen_addr()
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind((host, port))
        self.listener.listen(32)
        kt = threading.Thread(target=self.kernel.run_forever,
                              name="inferd-kernel", daemon=True)
        kt.start()
        at = threading.Thread(target=self._accept_loop,
                              name="inferd-accept", daemon=True)
        at.start()
        self._threads = [kt, at]

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, _ = self.listener.accept()
            except OSError:
                break
            conn = _Conn(self, sock)
            threading.Thread(target=conn.run, daemon=True).start()

    def serve_forever(self) -> None:
        if self.listener is None:
            self.start()
        try:
            self._threads[0].join()
        except KeyboardInterrupt:
            self.stop()

    def stop(self) -> None:
        self._stopping = True
        if self.listener is not None:
            try:
                self.listener.close()
            except OSError:
                pass
        self.kernel.stop()
