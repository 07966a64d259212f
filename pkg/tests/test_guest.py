"""Sandboxed program loading: validator rules, capability surface, caching."""
import textwrap

import pytest

import oracles
from inferd.config import ServerConfig
from inferd.errors import LoadFailure
from inferd.guest import compile_guest, validate_source
from inferd.runtime import Kernel, MemorySink


def kern():
    return Kernel(ServerConfig.from_dict({"models": [{"name": "mock-hash"}]}))


def launch_source(k, source, args=(), sink=None):
    phash, _ = k.upload_program(textwrap.dedent(source).encode())
    return k.launch(phash, list(args), client=sink)


# ---------------------------------------------------------------- validator


@pytest.mark.parametrize("source,fragment", [
    ("import os\nasync def main(api): pass", "Import"),
    ("from os import path\nasync def main(api): pass", "Import"),
    ("async def main(api):\n    global x", "Global"),
    ("def f():\n    def g():\n        nonlocal x\nasync def main(api): pass",
     "Nonlocal"),
    ("async def main(api):\n    try:\n        pass\n    except:\n        pass",
     "bare except"),
    ("async def main(api):\n    return api.__class__", "dunder"),
    ("async def main(api):\n    x = __import__", "dunder"),
    ("class C:\n    def __init__(self): pass\nasync def main(api): pass",
     "dunder"),
    ("async def main(api): return (", "syntax error"),
])
def test_validator_rejects(source, fragment):
    with pytest.raises(LoadFailure) as e:
        compile_guest(source, "t")
    assert fragment in str(e.value)


def test_main_must_be_async():
    with pytest.raises(LoadFailure) as e:
        compile_guest("def main(api):\n    pass", "t")
    assert "async def main" in str(e.value)
    with pytest.raises(LoadFailure):
        compile_guest("x = 1", "t")


def test_validator_accepts_ordinary_code():
    validate_source(textwrap.dedent("""
        async def main(api):
            total = sum(i * i for i in range(10))
            try:
                total += 1
            except ValueError as e:
                total = repr(e)
            return str(total)
    """))


# ------------------------------------------------------------- capabilities


def test_guest_runs_and_print_routes_to_client():
    k = kern()
    sink = MemorySink()
    inst = launch_source(k, """
        async def main(api):
            print("from", "guest")
            api.send(b"raw")
            return "ok"
    """, sink=sink)
    k.run_until_idle()
    assert inst.status == "finished" and inst.result == "ok"
    assert sink.text == "from guest\nraw"


def test_guest_args_pass_through():
    k = kern()
    sink = MemorySink()
    inst = launch_source(k, """
        async def main(api):
            api.send(",".join(api.get_args()))
    """, args=["a", "--b", "1"], sink=sink)
    k.run_until_idle()
    assert sink.text == "a,--b,1"


def test_guest_lib_generates_tokens():
    k = kern()
    sink = MemorySink()
    inst = launch_source(k, """
        async def main(api):
            ctx = lib.Context(api)
            await ctx.fill("Hello, ")
            toks, text = await ctx.generate(lib.GreedySampler(), 10)
            api.send(bytes(toks))
            ctx.close()
    """, sink=sink)
    k.run_until_idle()
    assert inst.status == "finished"
    assert sink.messages[-1] == bytes(oracles.greedy_rollout("Hello, ", 10))


def test_guest_missing_ambient_builtins():
    k = kern()
    inst = launch_source(k, """
        async def main(api):
            open("/etc/passwd")
    """)
    k.run_until_idle()
    assert inst.status == "failed"
    assert "NameError" in inst.detail


@pytest.mark.parametrize("name", ["getattr", "setattr", "type", "eval",
                                  "exec", "globals", "locals", "vars",
                                  "compile", "object", "super"])
def test_introspection_tools_absent(name):
    k = kern()
    inst = launch_source(k, f"""
        async def main(api):
            {name}
    """)
    k.run_until_idle()
    assert inst.status == "failed"
    assert "NameError" in inst.detail


def test_guest_failure_reports_detail():
    k = kern()
    inst = launch_source(k, """
        async def main(api):
            raise ValueError("inside guest")
    """)
    k.run_until_idle()
    assert inst.status == "failed"
    assert "inside guest" in inst.detail


def test_toplevel_failure_raises_load_failure():
    k = kern()
    with pytest.raises(LoadFailure):
        launch_source(k, """
            boom = 1 // 0
            async def main(api):
                pass
        """)
    assert k.instances == {}
    assert k.resources.audit() is None


def test_rebound_main_raises_load_failure():
    k = kern()
    with pytest.raises(LoadFailure):
        launch_source(k, """
            async def main(api):
                pass
            main = 5
        """)


def test_guest_cannot_swallow_termination():
    k = kern()
    sink = MemorySink()
    inst = launch_source(k, """
        async def main(api):
            try:
                await api.sleep(60.0)
            except Exception:
                api.send(b"swallowed")
            api.send(b"escaped")
    """, sink=sink)
    k.run_until_idle(max_virtual_s=0.1)
    k.terminate(inst.id)
    k.run_until_idle()
    assert inst.status == "terminated"
    assert sink.messages == []


def test_guest_finally_cannot_reach_the_client_after_exit():
    k = kern()
    sink = MemorySink()
    inst = launch_source(k, """
        async def main(api):
            try:
                await api.sleep(60.0)
            finally:
                api.send(b"parting shot")
    """, sink=sink)
    k.run_until_idle(max_virtual_s=0.1)
    k.terminate(inst.id)
    k.run_until_idle()
    assert inst.status == "terminated"
    assert sink.messages == []


# ------------------------------------------------------------------ caching


def test_upload_is_content_addressed():
    k = kern()
    h1, cached1 = k.upload_program(b"async def main(api): pass")
    h2, cached2 = k.upload_program(b"async def main(api): pass")
    assert h1 == h2
    assert (cached1, cached2) == (False, True)


def test_second_launch_is_warm():
    k = kern()
    src = b"async def main(api):\n    return 'x'"
    phash, _ = k.upload_program(src)
    cold = k.launch(phash)
    k.run_until_idle()
    warm = k.launch(phash)
    k.run_until_idle()
    assert cold.warm is False and cold.load_s > 0.0
    assert warm.warm is True and warm.load_s == 0.0
    assert cold.status == warm.status == "finished"


def test_builtin_launches_are_always_warm():
    k = kern()
    inst = k.launch("text_completion", ["hi", "--max-tokens", "1"])
    k.run_until_idle()
    assert inst.warm is True and inst.load_s == 0.0
