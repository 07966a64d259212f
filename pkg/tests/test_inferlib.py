"""Context bookkeeping and samplers, driven through a virtual-clock kernel.

Every distribution a Context produces is checked against the standalone
mock-model oracle, so a single misplaced position or stale page shows up as
a probability mismatch rather than a silent drift.
"""
import pytest

import oracles
from inferd.config import ServerConfig
from inferd.errors import InvalidArgument
from inferd.hashing import SplitMixStream
from inferd.inferlib import Context, GreedySampler, TopKSampler
from inferd.runtime import Kernel, MemorySink


def kernel(progs, **over):
    raw = {"models": [{"name": "mock-hash"}], "kv_pages": 16, "embeds": 64}
    raw.update(over)
    return Kernel(ServerConfig.from_dict(raw), builtins=progs)


def run_one(main, *, sink=None, **over):
    k = kernel({"p": main}, **over)
    inst = k.launch("p", [], client=sink)
    k.run_until_idle()
    return k, inst


def dist_oracle(tokens, k):
    return oracles.mock_dist(list(enumerate(tokens)), k)


def entries(dist):
    return [(int(t), p) for t, p in dist.entries]


# ------------------------------------------------------------------ filling


def test_fill_prepends_bos_once():
    got = {}

    async def main(api):
        c = Context(api)
        first = await c.fill("Hi")
        second = await c.fill("!")
        got["first"] = first
        got["second"] = second
        got["tokens"] = list(c.tokens)
        got["position"] = c.position
        c.close()

    _, inst = run_one(main)
    assert inst.status == "finished"
    assert got["first"] == [oracles.BOS, 72, 105]
    assert got["second"] == [33]
    assert got["tokens"] == [oracles.BOS, 72, 105, 33]
    assert got["position"] == 4


def test_fill_bos_override():
    got = {}

    async def main(api):
        c = Context(api)
        first = await c.fill("Hi", bos=False)
        forced = await c.fill("!", bos=True)
        got["first"] = first
        got["forced"] = forced
        c.close()

    run_one(main)
    assert got["first"] == [72, 105]
    assert got["forced"] == [oracles.BOS, 33]


def test_consecutive_fills_flush_as_one_forward():
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("Hi")
        await c.fill("!!")
        dist = await c.next_dist(k=4)
        got["entries"] = entries(dist)
        c.close()

    k, _ = run_one(main)
    forwards = [e for e in k.events.filter("dispatch") if e["ctype"] == "forward"]
    assert [e["tokens"] for e in forwards] == [5]
    toks = [oracles.BOS] + oracles.tokenize("Hi!!")
    assert got["entries"] == dist_oracle(toks, 4)


def test_step_holdback_splits_the_flush():
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("hell")  # BOS + 4 bytes
        c.step(holdback=2)
        got["pending_after"] = list(c.pending)
        dist = await c.next_dist(k=3)
        got["entries"] = entries(dist)
        c.close()

    k, _ = run_one(main)
    assert got["pending_after"] == oracles.tokenize("ll")
    forwards = [e for e in k.events.filter("dispatch") if e["ctype"] == "forward"]
    assert [e["tokens"] for e in forwards] == [3, 2]
    toks = [oracles.BOS] + oracles.tokenize("hell")
    assert got["entries"] == dist_oracle(toks, 3)


def test_step_with_nothing_pending_returns_none():
    got = {}

    async def main(api):
        c = Context(api)
        got["empty"] = c.step()
        await c.fill("Hi")
        got["all_held"] = c.step(holdback=3)
        got["flush"] = c.step() is not None
        c.close()

    run_one(main)
    assert got["empty"] is None
    assert got["all_held"] is None
    assert got["flush"] is True


def test_next_dist_without_state_raises():
    got = {}

    async def main(api):
        c = Context(api)
        try:
            await c.next_dist()
        except InvalidArgument:
            got["fresh"] = "raised"
        await c.fill("Hi")
        c.step(states=0)  # forward without harvesting an output state
        try:
            await c.next_dist()
        except InvalidArgument:
            got["states0"] = "raised"
        c.close()

    _, inst = run_one(main)
    assert inst.status == "finished"
    assert got == {"fresh": "raised", "states0": "raised"}


def test_explicit_queue_is_used():
    got = {}

    async def main(api):
        q = api.create_queue(None)
        c = Context(api, queue=q)
        got["same"] = c.q is q
        c.close()

    run_one(main)
    assert got["same"] is True


# --------------------------------------------------------- page bookkeeping


@pytest.mark.parametrize("cap", [1, 2, 3, 4, 7])
def test_page_accounting_across_capacities(cap):
    """Distributions stay oracle-exact no matter how tokens land on pages."""
    got = {"checks": [], "dists": []}

    async def main(api):
        c = Context(api)
        await c.fill("hello wo")  # 9 tokens with BOS
        for ch in "rld":
            c.append(ord(ch))
            dist = await c.next_dist(k=3)
            got["dists"].append(entries(dist))
            flushed = len(c.tokens) - len(c.pending)
            held = c.capacity * len(c.full) + c.partial_used
            got["checks"].append((flushed, held, c.position))
        c.close()

    k, inst = run_one(main, page_capacity=cap)
    assert inst.status == "finished"
    toks = [oracles.BOS] + oracles.tokenize("hello wo")
    for i, ch in enumerate("rld"):
        toks.append(ord(ch))
        assert got["dists"][i] == dist_oracle(toks, 3), f"cap={cap} step={i}"
    for flushed, held, position in got["checks"]:
        assert flushed == held
        assert position == flushed
    assert k.resources.audit() is None
    assert k.resources.free_page_count() == k.config.kv_pages
    assert k.resources.free_emb_count() == k.config.embeds


# --------------------------------------------------------------- generation


def test_generate_greedy_matches_oracle():
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("Hello, ")
        out, text = await c.generate(GreedySampler(), 10)
        got["out"] = out
        got["text"] = text
        c.close()

    run_one(main)
    expect = oracles.greedy_rollout("Hello, ", 10)
    assert got["out"] == expect
    assert got["text"] == oracles.detokenize(expect)


def test_generate_stops_at_eos():
    expect = oracles.greedy_rollout("p5", 24)
    assert len(expect) == 9  # this prompt reaches EOS early
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("p5")
        out, _ = await c.generate(GreedySampler(), 24)
        got["out"] = out
        c.close()

    run_one(main)
    assert got["out"] == expect
    assert oracles.EOS not in got["out"]


def test_generate_stop_text():
    roll = oracles.greedy_rollout("Hello, ", 10)
    assert oracles.detokenize(roll[:3]).endswith(b"ak")
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("Hello, ")
        out, text = await c.generate(GreedySampler(), 10, stop_text="ak")
        got["out"] = out
        got["text"] = text
        c.close()

    run_one(main)
    assert got["out"] == roll[:3]
    assert got["text"].endswith(b"ak")


def test_generate_stream_sends_pieces():
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("Hello, ")
        out, text = await c.generate(GreedySampler(), 6, stream=True)
        got["out"] = out
        got["text"] = text
        c.close()

    sink = MemorySink()
    run_one(main, sink=sink)
    assert sink.messages == [bytes([t]) for t in got["out"]]
    assert b"".join(sink.messages) == got["text"]


def test_generate_k_follows_sampler_then_override():
    class Probe:
        wants_k = 3

        def __init__(self):
            self.sizes = []

        def pick(self, dist, step):
            self.sizes.append(len(dist.entries))
            return dist.argmax()

    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("Hi")
        probe = Probe()
        await c.generate(probe, 2)
        await c.generate(probe, 1, k=6)
        got["sizes"] = probe.sizes
        c.close()

    run_one(main)
    assert got["sizes"] == [3, 3, 6]


# ----------------------------------------------------------------- samplers


def topk_expected(prompt, n, k, seed, temp=1.0):
    """Reproduce the sampler's walk from the oracle distribution."""
    toks = [oracles.BOS] + oracles.tokenize(prompt)
    stream = SplitMixStream(seed)
    out = []
    for _ in range(n):
        top = dist_oracle(toks, k)
        weights = [float(p) ** (1.0 / temp) for _, p in top]
        u = stream.next_float() * sum(weights)
        acc = 0.0
        pick = top[-1][0]
        for (v, _), w in zip(top, weights):
            acc += w
            if u < acc:
                pick = v
                break
        out.append(pick)
        if pick == oracles.EOS:
            break
        toks.append(pick)
    return out


def sample_run(k_val, seed, temp=1.0):
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("Hi")
        out, _ = await c.generate(
            TopKSampler(k_val, temperature=temp, seed=seed), 8, stop_eos=False)
        got["out"] = out
        c.close()

    run_one(main)
    return got["out"]


def test_topk_seeded_determinism():
    a = sample_run(4, seed=11)
    b = sample_run(4, seed=11)
    assert a == b == topk_expected("Hi", 8, 4, 11)
    assert a == [49, 3, 116, 209, 226, 164, 184, 222]
    assert sample_run(4, seed=12) == topk_expected("Hi", 8, 4, 12) != a


def test_topk_temperature_changes_the_walk():
    sharp = sample_run(4, seed=11, temp=0.5)
    assert sharp == topk_expected("Hi", 8, 4, 11, temp=0.5)


def test_topk_k1_is_greedy():
    assert sample_run(1, seed=5) == oracles.greedy_rollout("Hi", 8)


def test_sampler_validation():
    with pytest.raises(InvalidArgument):
        TopKSampler(0)
    with pytest.raises(InvalidArgument):
        TopKSampler(2, temperature=0.0)
    with pytest.raises(InvalidArgument):
        TopKSampler(2, temperature=-1.0)


def test_wants_k_defaults():
    assert GreedySampler.wants_k == 1
    assert TopKSampler(7).wants_k == 7


# ------------------------------------------------------------------ forking


def test_fork_diverges_and_both_match_oracle():
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("AB")
        c.step()
        child = await c.fork()
        c.append(ord("C"))
        child.append(ord("D"))
        got["parent"] = entries(await c.next_dist(k=3))
        got["child"] = entries(await child.next_dist(k=3))
        got["parent_again"] = entries(await c.next_dist(k=3))
        child.close()
        c.close()

    _, inst = run_one(main)
    assert inst.status == "finished"
    base = [oracles.BOS] + oracles.tokenize("AB")
    assert got["parent"] == dist_oracle(base + [ord("C")], 3)
    assert got["child"] == dist_oracle(base + [ord("D")], 3)
    assert got["parent_again"] == got["parent"]


def test_fork_with_pending_raises():
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("AB")
        try:
            await c.fork()
        except InvalidArgument:
            got["raised"] = True
        c.close()

    _, inst = run_one(main)
    assert inst.status == "finished"
    assert got.get("raised") is True


def test_fork_has_no_state_until_stepped():
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("AB")
        c.step()
        child = await c.fork()
        try:
            await child.next_dist()
        except InvalidArgument:
            got["raised"] = True
        child.close()
        c.close()

    run_one(main)
    assert got.get("raised") is True


def test_fork_shares_full_pages_and_copies_the_tail():
    """Parent closes right after forking; the child must keep working."""
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("hello")  # 6 tokens, cap 4: one full page + 2 in tail
        c.step()
        child = await c.fork()
        got["full_shared"] = child.full[0] is c.full[0]
        got["refs"] = c.full[0].refs
        got["tail_copied"] = child.partial != c.partial
        got["tail_used"] = child.partial_used
        c.close()
        got["refs_after_close"] = child.full[0].refs
        child.append(ord("X"))
        got["child_dist"] = entries(await child.next_dist(k=3))
        child.close()
        got["close_twice"] = child.close() is None

    k, inst = run_one(main, page_capacity=4)
    assert inst.status == "finished"
    assert got["full_shared"] is True
    assert got["refs"] == 2
    assert got["tail_copied"] is True
    assert got["tail_used"] == 2
    assert got["refs_after_close"] == 1
    toks = [oracles.BOS] + oracles.tokenize("hello") + [ord("X")]
    assert got["child_dist"] == dist_oracle(toks, 3)
    assert got["close_twice"] is True
    assert k.resources.audit() is None
    assert k.resources.free_page_count() == k.config.kv_pages
    assert k.resources.free_emb_count() == k.config.embeds


def test_three_way_fork_frees_only_with_last_closer():
    got = {}

    async def main(api):
        c = Context(api)
        await c.fill("hello wo")  # two full pages at cap 4
        c.step()
        a = await c.fork()
        b = await c.fork()
        got["refs"] = c.full[0].refs
        c.close()
        a.close()
        # b alone keeps the shared pages alive
        b.append(ord("!"))
        got["b_dist"] = entries(await b.next_dist(k=3))
        got["refs_last"] = b.full[0].refs
        b.close()

    k, inst = run_one(main, page_capacity=4)
    assert inst.status == "finished"
    assert got["refs"] == 3
    assert got["refs_last"] == 1
    toks = [oracles.BOS] + oracles.tokenize("hello wo") + [ord("!")]
    assert got["b_dist"] == dist_oracle(toks, 3)
    assert k.resources.audit() is None
    assert k.resources.free_page_count() == k.config.kv_pages
