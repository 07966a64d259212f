"""Length-prefixed JSON frame codec.

Every message on the wire protocol and on the control<->backend boundary is
one frame: a u32 big-endian byte length followed by that many bytes of UTF-8
JSON encoding a single object. Payloads above MAX_FRAME_BYTES are rejected.
Binary fields travel base64-encoded under *_b64 keys.
"""
from __future__ import annotations

import base64
import json
import struct
from typing import BinaryIO, Optional

from .errors import FrameError

HEADER_SIZE = 4
MAX_FRAME_BYTES = 16 * 1024 * 1024


def encode_frame(payload: dict) -> bytes:
    if not isinstance(payload, dict):
        raise FrameError("frame payload must be a JSON object")
    body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {len(body)} bytes exceeds {MAX_FRAME_BYTES}")
    return struct.pack(">I", len(body)) + body


def read_frame(stream: BinaryIO) -> Optional[dict]:
    """Read one frame from a blocking byte stream; None on clean EOF."""
    header = _read_exact(stream, HEADER_SIZE)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"declared frame length {length} exceeds {MAX_FRAME_BYTES}")
    body = _read_exact(stream, length) if length else b""
    if body is None:
        raise FrameError("stream ended mid-frame")
    return decode_body(body)


def decode_body(body: bytes) -> dict:
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"malformed frame body: {e}")
    if not isinstance(payload, dict):
        raise FrameError("frame body must be a JSON object")
    return payload


def _read_exact(stream: BinaryIO, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if buf:
                raise FrameError("stream ended mid-frame")
            return None
        buf += chunk
    return buf


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as e:
        raise FrameError(f"bad base64 field: {e}")
