"""inferd: a programmable inference daemon.

The serving layer exposes fine-grained model operations (embed, forward,
sample, page management) instead of a fixed completion endpoint. Programs
called inferlets run inside the server, own their KV pages and embeds, and
drive generation through a small async API; the kernel batches compatible
work across programs and enforces isolation between them.
"""
from .config import PolicySpec, ServerConfig
from .errors import KernelError
from .runtime import Kernel, MemorySink
from .service import Server, ServiceCore

__version__ = "0.1.0"

__all__ = [
    "Kernel",
    "KernelError",
    "MemorySink",
    "PolicySpec",
    "Server",
    "ServerConfig",
    "ServiceCore",
    "__version__",
]
