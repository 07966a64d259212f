"""Command line front: serve, run, ls, kill.

`run` speaks the wire protocol like any other client would. Program output
bytes go to stdout untouched; everything else (status lines, errors) goes
to stderr so pipelines see only what the program sent.
"""
from __future__ import annotations

import argparse
import os
import socket
import sys
from typing import List, Optional, Tuple

from .config import PolicySpec, ServerConfig
from .frames import b64d, b64e, encode_frame, read_frame
from .service import Server

FINAL_STATUSES = ("finished", "failed", "terminated")


def _parse_addr(text: str) -> Tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


class WireClient:
    """Blocking single-connection client; pushes interleave with responses."""

    def __init__(self, addr: Tuple[str, int], timeout: Optional[float] = None):
        self.sock = socket.create_connection(addr, timeout=timeout)
        self.rfile = self.sock.makefile("rb")
        self._next_id = 1

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def request(self, payload: dict) -> dict:
        """Send one op and wait for its response, buffering no pushes.

        Only used for ops where no push can race the response (queries,
        uploads, terminate). `run` reads the stream manually instead.
        """
        rid = self._send(payload)
        while True:
            frame = self._read()
            if frame.get("id") == rid:
                return frame

    def _send(self, payload: dict) -> int:
        rid = self._next_id
        self._next_id += 1
        payload = dict(payload)
        payload["id"] = rid
        self.sock.sendall(encode_frame(payload))
        return rid

    def _read(self) -> dict:
        frame = read_frame(self.rfile)
        if frame is None:
            raise ConnectionError("server closed the connection")
        return frame


def cmd_serve(args) -> int:
    if args.config:
        config = ServerConfig.from_file(args.config)
    else:
        config = ServerConfig()
    if args.listen:
        config.listen = args.listen
    if args.policy:
        config.policy = PolicySpec.parse(args.policy)

    kernel = None
    if args.split_backend:
        from .backends import SubprocessChannel
        from .clock import WallClock
        from .runtime import Kernel
        kernel = Kernel(config, clock=WallClock(),
                        channel=SubprocessChannel(config))
    server = Server(config, kernel=kernel)
    server.start()
    host, port = server.addr
    models = ", ".join(m["name"] for m in server.kernel.list_models())
    print(f"inferd: listening on {host}:{port}", file=sys.stderr, flush=True)
    print(f"inferd: models [{models}], policy {config.policy.describe()}",
          file=sys.stderr, flush=True)
    server.serve_forever()
    return 0


def cmd_run(args) -> int:
    client = WireClient(_parse_addr(args.addr))
    try:
        program = args.program
        if os.path.isfile(program):
            with open(program, "rb") as f:
                data = f.read()
            resp = client.request({"op": "upload_program", "data_b64": b64e(data)})
            if not resp.get("ok"):
                print(f"upload failed: {resp.get('err')}: {resp.get('msg')}",
                      file=sys.stderr)
                return 1
            program = resp["hash"]

        rid = client._send({"op": "launch", "program": program,
                            "args": args.args})
        instance = None
        out = sys.stdout.buffer
        while True:
            frame = client._read()
            if frame.get("id") == rid:
                if not frame.get("ok"):
                    print(f"launch failed: {frame.get('err')}: {frame.get('msg')}",
                          file=sys.stderr)
                    return 1
                instance = frame["instance"]
                continue
            op = frame.get("op")
            if op == "msg":
                out.write(b64d(frame["data_b64"]))
                out.flush()
            elif op == "status" and frame.get("status") in FINAL_STATUSES:
                status = frame["status"]
                if status == "finished":
                    if args.verbose and frame.get("detail"):
                        print(f"\n[{frame['detail']}]", file=sys.stderr)
                    return 0
                print(f"instance {instance} {status}: {frame.get('detail')}",
                      file=sys.stderr)
                return 1
    finally:
        client.close()


def cmd_ls(args) -> int:
    client = WireClient(_parse_addr(args.addr), timeout=10.0)
    try:
        progs = client.request({"op": "query_programs"})
        insts = client.request({"op": "query_instances"})
    finally:
        client.close()
    print("programs:", ", ".join(progs.get("programs", [])) or "(none)")
    rows = insts.get("instances", [])
    if not rows:
        print("instances: (none)")
        return 0
    print(f"{'id':>4}  {'status':<10}  {'warm':<5}  {'load_ms':>8}  program")
    for r in rows:
        print(f"{r['instance']:>4}  {r['status']:<10}  "
              f"{str(r['warm']).lower():<5}  {r['load_ms']:>8.2f}  {r['program']}")
    return 0


def cmd_kill(args) -> int:
    client = WireClient(_parse_addr(args.addr), timeout=10.0)
    try:
        resp = client.request({"op": "terminate", "instance": args.instance})
    finally:
        client.close()
    if not resp.get("ok"):
        print(f"kill failed: {resp.get('err')}: {resp.get('msg')}", file=sys.stderr)
        return 1
    print("terminated" if resp.get("terminated") else "already stopped")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inferd",
                                     description="programmable inference daemon")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="start the server")
    p.add_argument("--config", help="path to a JSON config file")
    p.add_argument("--listen", help="host:port to bind (overrides config)")
    p.add_argument("--policy",
                   help="batching policy: adaptive, eager, k=N, or t=MS")
    p.add_argument("--split-backend", action="store_true",
                   help="run model execution in a child process")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("run", help="launch a program and stream its output")
    p.add_argument("program", help="builtin name, program hash, or .py file")
    p.add_argument("args", nargs=argparse.REMAINDER,
                   help="arguments passed through to the program")
    p.add_argument("--addr", default="127.0.0.1:7151")
    p.add_argument("--verbose", action="store_true",
                   help="print the program's return value to stderr")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ls", help="list programs and instances")
    p.add_argument("--addr", default="127.0.0.1:7151")
    p.set_defaults(fn=cmd_ls)

    p = sub.add_parser("kill", help="terminate an instance")
    p.add_argument("instance", type=int)
    p.add_argument("--addr", default="127.0.0.1:7151")
    p.set_defaults(fn=cmd_kill)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
