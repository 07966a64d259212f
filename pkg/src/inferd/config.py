"""Server configuration.

Loaded from a JSON file or built directly in code. Every key has a default so
an empty config is a working desk-scale server.

Documented keys:
  listen            "host:port" for the wire server
  kv_pages          physical KV page pool size
  embeds            physical embed pool size
  page_capacity     token slots per KV page, 1..32
  top_k_default     default truncation K for next-token distributions
  models            list of model entries: {"name": ..., plus model kwargs,
                    optional "traits" subset override}
  http_allowlist    host[:port] patterns inferlets may reach; default deny all
  http_timeout_s    outbound request timeout
  mailbox_capacity  bounded inferlet mailbox length
  policy            "adaptive" | "eager" | {"k": n} | {"t_ms": x}
                    (text forms "k=n" and "t=ms" also accepted)
  max_batch_tokens  forward batch cap, counted in input tokens
  max_batch_calls   batch cap for every other call type, counted in calls
  service_c0_ms     modeled per-batch fixed cost (virtual clock only)
  service_c1_ms     modeled per-token/per-call marginal cost (virtual clock only)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from .errors import InvalidArgument

MIN_PAGE_CAPACITY = 1
MAX_PAGE_CAPACITY = 32


def default_models() -> List[Dict[str, Any]]:
    return [{"name": "mock-hash"}, {"name": "toy-transformer", "seed": 42}]


@dataclass
class PolicySpec:
    """Dispatch policy selection: kind is one of eager|k|t|adaptive."""

    kind: str = "adaptive"
    k: int = 0
    t_ms: float = 0.0

    @staticmethod
    def parse(raw) -> "PolicySpec":
        if raw is None:
            return PolicySpec()
        if isinstance(raw, PolicySpec):
            return raw
        if isinstance(raw, str):
            if raw in ("adaptive", "eager"):
                return PolicySpec(kind=raw)
            if raw.startswith("k="):
                return PolicySpec.parse({"k": int(raw[2:])})
            if raw.startswith("t="):
                return PolicySpec.parse({"t_ms": float(raw[2:])})
            raise InvalidArgument(f"unknown policy {raw!r}")
        if isinstance(raw, dict):
            if "k" in raw:
                k = int(raw["k"])
                if k < 1:
                    raise InvalidArgument("policy k must be >= 1")
                return PolicySpec(kind="k", k=k)
            if "t_ms" in raw:
                t = float(raw["t_ms"])
                if t < 0:
                    raise InvalidArgument("policy t_ms must be >= 0")
                return PolicySpec(kind="t", t_ms=t)
        raise InvalidArgument(f"unparseable policy {raw!r}")

    def describe(self) -> str:
        if self.kind == "k":
            return f"k({self.k})"
        if self.kind == "t":
            return f"t({self.t_ms}ms)"
        return self.kind


@dataclass
class ServerConfig:
    listen: str = "127.0.0.1:7151"
    kv_pages: int = 4096
    embeds: int = 4096
    page_capacity: int = 16
    top_k_default: int = 256
    models: List[Dict[str, Any]] = field(default_factory=default_models)
    http_allowlist: List[str] = field(default_factory=list)
    http_timeout_s: float = 30.0
    mailbox_capacity: int = 1024
    policy: PolicySpec = field(default_factory=PolicySpec)
    max_batch_tokens: int = 256
    max_batch_calls: int = 256
    service_c0_ms: float = 1.0
    service_c1_ms: float = 0.05

    def __post_init__(self):
        if not (MIN_PAGE_CAPACITY <= self.page_capacity <= MAX_PAGE_CAPACITY):
            raise InvalidArgument(
                f"page_capacity must be in [{MIN_PAGE_CAPACITY}, {MAX_PAGE_CAPACITY}]"
            )
        if self.kv_pages < 1 or self.embeds < 1:
            raise InvalidArgument("pools must hold at least one unit")
        if self.top_k_default < 1:
            raise InvalidArgument("top_k_default must be >= 1")
        self.policy = PolicySpec.parse(self.policy)

    @staticmethod
    def from_dict(raw: Dict[str, Any]) -> "ServerConfig":
        known = {f for f in ServerConfig.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        return ServerConfig(**raw)

    @staticmethod
    def from_file(path: str) -> "ServerConfig":
        with open(path, "r", encoding="utf-8") as f:
            return ServerConfig.from_dict(json.load(f))

    def to_dict(self) -> Dict[str, Any]:
        d = {
            "listen": self.listen,
            "kv_pages": self.kv_pages,
            "embeds": self.embeds,
            "page_capacity": self.page_capacity,
            "top_k_default": self.top_k_default,
            "models": self.models,
            "http_allowlist": list(self.http_allowlist),
            "http_timeout_s": self.http_timeout_s,
            "mailbox_capacity": self.mailbox_capacity,
            "max_batch_tokens": self.max_batch_tokens,
            "max_batch_calls": self.max_batch_calls,
            "service_c0_ms": self.service_c0_ms,
            "service_c1_ms": self.service_c1_ms,
        }
        if self.policy.kind == "k":
            d["policy"] = {"k": self.policy.k}
        elif self.policy.kind == "t":
            d["policy"] = {"t_ms": self.policy.t_ms}
        else:
            d["policy"] = self.policy.kind
        return d

    def listen_addr(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)
