"""Outbound HTTP for inferlets.

Access is default-deny: a request only leaves if the target host matches the
configured allowlist. Transports are injectable so virtual-clock runs stay
deterministic: the simulated transport resolves canned routes after a
configured virtual latency, the real transport does blocking I/O on a worker
thread and posts the result back to the coordinator.
"""
from __future__ import annotations

import socket
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple
from urllib.parse import urlsplit

from .errors import Denied, InvalidArgument, NetworkError, Timeout


@dataclass
class HttpResponse:
    status: int
    headers: Dict[str, str]
    body: bytes


def check_allowlist(url: str, allowlist) -> None:
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https"):
        raise InvalidArgument(f"unsupported scheme {parts.scheme!r}")
    host = (parts.hostname or "").lower()
    port = parts.port or (443 if parts.scheme == "https" else 80)
    for entry in allowlist:
        ehost, _, eport = entry.partition(":")
        if ehost.lower() != host:
            continue
        if not eport or int(eport) == port:
            return
    raise Denied(f"host {host}:{port} is not on the allowlist")


class HttpTransport:
    def issue(self, kernel, method: str, url: str, body: Optional[bytes],
              timeout: float, completion) -> None:
        raise NotImplementedError


@dataclass
class SimRoute:
    status: int = 200
    headers: Dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    latency_s: float = 0.005


class SimulatedHttpTransport(HttpTransport):
    """Canned routes with virtual latencies; exact-url lookup, then prefix."""

    def __init__(self):
        self.routes: Dict[str, SimRoute] = {}
        self.handlers: Dict[str, Callable[[str, str, Optional[bytes]], SimRoute]] = {}
        self.log: list = []

    def add_route(self, url: str, body: bytes = b"", status: int = 200,
                  latency_s: float = 0.005, headers: Optional[dict] = None) -> None:
        self.routes[url] = SimRoute(status, headers or {}, body, latency_s)

    def add_handler(self, prefix: str, fn) -> None:
        self.handlers[prefix] = fn

    def _lookup(self, method, url, body) -> SimRoute:
        if url in self.routes:
            return self.routes[url]
        for prefix, fn in self.handlers.items():
            if url.startswith(prefix):
                return fn(method, url, body)
        raise NetworkError(f"no simulated route for {url}")

    def issue(self, kernel, method, url, body, timeout, completion) -> None:
        self.log.append((method, url))
        try:
            route = self._lookup(method, url, body)
        except NetworkError as e:
            kernel.at(kernel.now(), lambda err=e: completion.fail(err))
            return
        if route.latency_s >= timeout:
            kernel.at(kernel.now() + timeout,
                      lambda: completion.fail(Timeout(f"{url} exceeded {timeout}s")))
            return
        resp = HttpResponse(route.status, dict(route.headers), route.body)
        kernel.at(kernel.now() + route.latency_s, lambda: completion.resolve(resp))


class RealHttpTransport(HttpTransport):
    """Blocking urllib on a daemon thread; result posted to the kernel inbox."""

    def issue(self, kernel, method, url, body, timeout, completion) -> None:
        def work():
            try:
                req = urllib.request.Request(url, data=body, method=method)
                with urllib.request.urlopen(req, timeout=timeout) as r:
                    resp = HttpResponse(r.status, dict(r.headers), r.read())
            except urllib.error.HTTPError as e:
                resp = HttpResponse(e.code, dict(e.headers or {}), e.read())
            except (socket.timeout, TimeoutError):
                kernel.post(lambda: completion.fail(Timeout(f"{url} timed out")))
                return
            except urllib.error.URLError as e:
                if isinstance(getattr(e, "reason", None), (socket.timeout, TimeoutError)):
                    err = Timeout(f"{url} timed out")
                else:
                    err = NetworkError(str(e))
                kernel.post(lambda: completion.fail(err))
                return
            except OSError as e:
                err = NetworkError(str(e))
                kernel.post(lambda: completion.fail(err))
                return
            kernel.post(lambda: completion.resolve(resp))

        threading.Thread(target=work, daemon=True).start()
