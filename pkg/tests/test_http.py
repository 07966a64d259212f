"""Outbound HTTP: allowlist policy, simulated routes, real sockets."""
import http.server
import threading
import time

import pytest

from inferd.clock import WallClock
from inferd.config import ServerConfig
from inferd.errors import Denied, InvalidArgument, NetworkError, Timeout
from inferd.http import (
    HttpResponse,
    RealHttpTransport,
    SimRoute,
    SimulatedHttpTransport,
    check_allowlist,
)
from inferd.runtime import Kernel, MemorySink


# ---------------------------------------------------------------- allowlist


def test_allowlist_exact_host():
    check_allowlist("http://api.test/x", ["api.test"])
    with pytest.raises(Denied):
        check_allowlist("http://other.test/x", ["api.test"])


def test_allowlist_denies_everything_by_default():
    with pytest.raises(Denied):
        check_allowlist("http://api.test/", [])


def test_allowlist_host_is_case_insensitive():
    check_allowlist("http://API.Test/x", ["api.test"])
    check_allowlist("http://api.test/x", ["API.Test"])


def test_allowlist_port_rules():
    # bare host matches any port
    check_allowlist("http://api.test:8080/", ["api.test"])
    # explicit port must match
    check_allowlist("http://api.test:8080/", ["api.test:8080"])
    with pytest.raises(Denied):
        check_allowlist("http://api.test:9090/", ["api.test:8080"])


def test_allowlist_default_ports_by_scheme():
    check_allowlist("http://api.test/", ["api.test:80"])
    check_allowlist("https://api.test/", ["api.test:443"])
    with pytest.raises(Denied):
        check_allowlist("http://api.test/", ["api.test:443"])


def test_allowlist_rejects_other_schemes():
    for url in ("ftp://api.test/x", "file:///etc/passwd", "ws://api.test/"):
        with pytest.raises(InvalidArgument):
            check_allowlist(url, ["api.test"])


def test_allowlist_empty_hostname_denied():
    with pytest.raises(Denied):
        check_allowlist("http:///just-a-path", ["api.test"])


# ------------------------------------------------------- simulated transport


ALLOW = ["sim.test", "slow.test", "api.test:8080"]


def sim_kernel(main, transport, **over):
    raw = {"models": [{"name": "mock-hash"}], "kv_pages": 8, "embeds": 32,
           "http_allowlist": ALLOW}
    raw.update(over)
    k = Kernel(ServerConfig.from_dict(raw), builtins={"p": main},
               http_transport=transport)
    inst = k.launch("p", [], client=None)
    k.run_until_idle()
    return k, inst


def test_get_resolves_after_virtual_latency():
    tr = SimulatedHttpTransport()
    tr.add_route("http://sim.test/hello", body=b"world", latency_s=0.25)
    got = {}

    async def main(api):
        resp = await api.http_get("http://sim.test/hello")
        got["resp"] = resp

    k, inst = sim_kernel(main, tr)
    assert inst.status == "finished"
    assert got["resp"].status == 200
    assert got["resp"].body == b"world"
    assert k.now() == pytest.approx(0.25)
    assert tr.log == [("GET", "http://sim.test/hello")]


def test_route_status_and_headers_pass_through():
    tr = SimulatedHttpTransport()
    tr.add_route("http://sim.test/missing", body=b"nope", status=404,
                 headers={"x-reason": "gone"})
    got = {}

    async def main(api):
        got["resp"] = await api.http_get("http://sim.test/missing")

    sim_kernel(main, tr)
    assert got["resp"].status == 404
    assert got["resp"].headers == {"x-reason": "gone"}


def test_timeout_fires_at_the_deadline():
    tr = SimulatedHttpTransport()
    tr.add_route("http://slow.test/x", latency_s=2.0)
    got = {}

    async def main(api):
        try:
            await api.http_get("http://slow.test/x", timeout=0.5)
        except Timeout:
            got["timed_out"] = True

    k, inst = sim_kernel(main, tr)
    assert inst.status == "finished"
    assert got.get("timed_out") is True
    assert k.now() == pytest.approx(0.5)


def test_default_timeout_comes_from_config():
    tr = SimulatedHttpTransport()
    tr.add_route("http://slow.test/x", latency_s=1.0)
    got = {}

    async def main(api):
        try:
            await api.http_get("http://slow.test/x")
        except Timeout:
            got["timed_out"] = True

    k, _ = sim_kernel(main, tr, http_timeout_s=0.25)
    assert got.get("timed_out") is True
    assert k.now() == pytest.approx(0.25)


def test_unrouted_url_is_a_network_error():
    tr = SimulatedHttpTransport()
    got = {}

    async def main(api):
        try:
            await api.http_get("http://sim.test/void")
        except NetworkError:
            got["err"] = True

    k, _ = sim_kernel(main, tr)
    assert got.get("err") is True
    assert k.now() == 0.0


def test_handler_sees_method_and_body():
    tr = SimulatedHttpTransport()
    seen = {}

    def echo(method, url, body):
        seen["method"] = method
        seen["body"] = body
        return SimRoute(status=201, body=body[::-1], latency_s=0.01)

    tr.add_handler("http://api.test:8080/", echo)
    got = {}

    async def main(api):
        got["resp"] = await api.http_post("http://api.test:8080/echo", "abc")

    sim_kernel(main, tr)
    assert seen == {"method": "POST", "body": b"abc"}
    assert got["resp"].status == 201
    assert got["resp"].body == b"cba"


def test_exact_route_beats_prefix_handler():
    tr = SimulatedHttpTransport()
    tr.add_handler("http://sim.test/", lambda m, u, b: SimRoute(body=b"handler"))
    tr.add_route("http://sim.test/pinned", body=b"route")
    got = {}

    async def main(api):
        got["pinned"] = (await api.http_get("http://sim.test/pinned")).body
        got["other"] = (await api.http_get("http://sim.test/other")).body

    sim_kernel(main, tr)
    assert got["pinned"] == b"route"
    assert got["other"] == b"handler"


def test_denied_host_never_reaches_the_transport():
    tr = SimulatedHttpTransport()
    got = {}

    async def main(api):
        try:
            await api.http_get("http://evil.test/")
        except Denied:
            got["denied"] = True

    _, inst = sim_kernel(main, tr)
    assert inst.status == "finished"
    assert got.get("denied") is True
    assert tr.log == []


def test_requests_are_logged_as_events():
    tr = SimulatedHttpTransport()
    tr.add_route("http://sim.test/a", body=b"x", latency_s=0.01)

    async def main(api):
        await api.http_get("http://sim.test/a")

    k, _ = sim_kernel(main, tr)
    recs = k.events.filter("http")
    assert len(recs) == 1
    assert recs[0]["method"] == "GET"
    assert recs[0]["url"] == "http://sim.test/a"


# ------------------------------------------------------------ real transport


class _Handler(http.server.BaseHTTPRequestHandler):
    def _reply(self, status, body):
        self.send_response(status)
        self.send_header("content-length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/slow":
            time.sleep(1.0)
        self._reply(200, b"real:" + self.path.encode())

    def do_POST(self):
        n = int(self.headers.get("content-length", 0))
        self._reply(200, self.rfile.read(n)[::-1])

    def log_message(self, *a):
        pass


@pytest.fixture(scope="module")
def httpd():
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    yield f"127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class _StopSink(MemorySink):
    def __init__(self, kernel):
        super().__init__()
        self.kernel = kernel

    def on_status(self, instance_id, status, detail):
        super().on_status(instance_id, status, detail)
        if status in ("finished", "failed", "terminated"):
            self.kernel.stop()


def wall_run(main, hostport, timeout_s=10.0):
    raw = {"models": [{"name": "mock-hash"}], "kv_pages": 8, "embeds": 32,
           "http_allowlist": [hostport, "127.0.0.1:1"]}
    k = Kernel(ServerConfig.from_dict(raw), builtins={"p": main},
               clock=WallClock(), http_transport=RealHttpTransport())
    sink = _StopSink(k)
    inst = k.launch("p", [], client=sink)
    watchdog = threading.Timer(timeout_s, k.stop)
    watchdog.start()
    try:
        k.run_forever()
    finally:
        watchdog.cancel()
        k.shutdown()
    return inst


def test_real_get_and_post_roundtrip(httpd):
    got = {}

    async def main(api):
        got["get"] = await api.http_get(f"http://{httpd}/ok")
        got["post"] = await api.http_post(f"http://{httpd}/echo", b"abc")

    inst = wall_run(main, httpd)
    assert inst.status == "finished", inst.detail
    assert got["get"].status == 200
    assert got["get"].body == b"real:/ok"
    assert got["post"].body == b"cba"


def test_real_timeout(httpd):
    got = {}

    async def main(api):
        try:
            await api.http_get(f"http://{httpd}/slow", timeout=0.3)
        except Timeout:
            got["timed_out"] = True

    inst = wall_run(main, httpd)
    assert inst.status == "finished", inst.detail
    assert got.get("timed_out") is True


def test_real_connection_refused(httpd):
    got = {}

    async def main(api):
        try:
            await api.http_get("http://127.0.0.1:1/", timeout=2.0)
        except NetworkError:
            got["refused"] = True

    inst = wall_run(main, httpd)
    assert inst.status == "finished", inst.detail
    assert got.get("refused") is True


def test_response_dataclass_shape():
    r = HttpResponse(200, {"a": "b"}, b"x")
    assert (r.status, r.headers, r.body) == (200, {"a": "b"}, b"x")
