"""Deterministic wire transcript: a scripted client session over ServiceCore.

record() drives a fresh virtual-clock kernel through upload, launch, stream,
send, and terminate round-trips and returns every frame that would cross the
socket, as (direction, bytes) pairs in order. The session is fully
deterministic, so the recorded bytes double as a golden fixture: regenerating
the transcript must reproduce the stored file exactly.
"""
import hashlib
import json
import textwrap
from pathlib import Path

from inferd.config import ServerConfig
from inferd.frames import b64e, encode_frame
from inferd.runtime import ClientSink, Kernel
from inferd.service import ServiceCore

FIXTURE_PATH = Path(__file__).parent / "fixtures" / "wire_golden.json"

HELLO_SOURCE = textwrap.dedent("""
    async def main(api):
        api.send(b"ready")
        return "bye"
""").encode()

TICKER_SOURCE = textwrap.dedent("""
    async def main(api):
        for i in [1, 2, 3]:
            await api.sleep(0.01)
            api.send("tick" + str(i))
        return "done"
""").encode()

HELLO_HASH = hashlib.sha256(HELLO_SOURCE).hexdigest()
TICKER_HASH = hashlib.sha256(TICKER_SOURCE).hexdigest()


def session():
    """The scripted requests: (request, settle, with_client)."""
    return [
        ({"op": "upload_program", "data_b64": b64e(HELLO_SOURCE), "id": 1},
         True, True),
        ({"op": "launch", "program": "text_completion",
          "args": ["--prompt", "Hello, ", "--max-tokens", "10"], "id": 2},
         True, True),
        ({"op": "upload_program", "data_b64": b64e(HELLO_SOURCE), "id": 3},
         True, True),
        ({"op": "launch", "program": HELLO_HASH, "args": [], "id": 4},
         True, True),
        ({"op": "query_programs", "id": 5}, True, True),
        ({"op": "upload_program", "data_b64": b64e(TICKER_SOURCE), "id": 6},
         True, True),
        # launched without a client; the stream op below picks it up before
        # the kernel runs, so every tick lands on the late subscriber
        ({"op": "launch", "program": TICKER_HASH, "args": [], "id": 7},
         False, False),
        ({"op": "stream", "instance": 3, "id": 8}, True, True),
        ({"op": "send", "instance": 1, "data_b64": b64e(b"x"), "id": 9},
         True, True),
        ({"op": "terminate", "instance": 2, "id": 10}, True, True),
    ]


class _FrameSink(ClientSink):
    """Encodes pushes exactly the way a socket connection would."""

    def __init__(self, out):
        self.out = out

    def on_message(self, iid, seq, data):
        self.out.append(("s2c", encode_frame(
            {"op": "msg", "instance": iid, "seq": seq, "data_b64": b64e(data)})))

    def on_status(self, iid, status, detail):
        self.out.append(("s2c", encode_frame(
            {"op": "status", "instance": iid, "status": status,
             "detail": detail})))


def record():
    config = ServerConfig.from_dict({
        "models": [{"name": "mock-hash"}],
        "kv_pages": 32, "embeds": 128,
    })
    kernel = Kernel(config)
    core = ServiceCore(kernel)
    out = []
    sink = _FrameSink(out)
    for req, settle, with_client in session():
        out.append(("c2s", encode_frame(req)))
        resp = core.handle(req, sink if with_client else None)
        out.append(("s2c", encode_frame(resp)))
        if settle:
            kernel.run_until_idle()
    kernel.shutdown()
    return out


def save(path=FIXTURE_PATH):
    frames = [{"dir": d, "hex": b.hex()} for d, b in record()]
    doc = {
        "note": "scripted client session; regenerate with make_wire_golden.py",
        "hello_hash": HELLO_HASH,
        "ticker_hash": TICKER_HASH,
        "frames": frames,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return doc


def load(path=FIXTURE_PATH):
    doc = json.loads(path.read_text())
    return [(f["dir"], bytes.fromhex(f["hex"])) for f in doc["frames"]]
