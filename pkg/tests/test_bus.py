import asyncio
import json
import random
import string
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cma.bus import Bus, Envelope, decode, encode, parse_topic, topic_for
from cma.clock import run_virtual
from cma.errors import BusStoppedError, DuplicateSubscriptionError, InvalidNameError, MalformedPayloadError

SAFE = string.ascii_letters + string.digits + "_-."


def make_env(**kw) -> Envelope:
    base = dict(msg_id="m1", agent_id="a", from_module="x", to_module="y", sent_at=1, body="hi", headers={})
    base.update(kw)
    return Envelope(**base)


def random_envelope(rng: random.Random) -> Envelope:
    name = lambda: "".join(rng.choice(SAFE) for _ in range(rng.randint(1, 12)))  # noqa: E731
    alphabet = string.printable + "éßдあ😀 \x00"
    body = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 200)))
    headers = {name(): "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 10))) for _ in range(rng.randint(0, 3))}
    return Envelope(
        msg_id=str(rng.getrandbits(64)),
        agent_id=name(),
        from_module=name(),
        to_module=name(),
        sent_at=rng.randint(0, 2**53),
        body=body,
        headers=headers,
    )


# -- topics ----------------------------------------------------------------------------
def test_topic_for_examples():
    assert topic_for("alter3", "summarizer") == "cma/alter3/module/summarizer/inbox"
    assert topic_for("p1", "magi_a") == "cma/p1/module/magi_a/inbox"


@pytest.mark.parametrize("agent,name", [("a", "bad/name"), ("a", "x+"), ("a", "#"), ("", "m"), ("a", "")])
def test_topic_for_rejects_unsafe_names(agent, name):
    with pytest.raises(InvalidNameError):
        topic_for(agent, name)


@given(st.text(alphabet=SAFE, min_size=1), st.text(alphabet=SAFE, min_size=1))
def test_topic_derivation_is_injective(agent, name):
    assert parse_topic(topic_for(agent, name)) == (agent, name)


# -- wire format -----------------------------------------------------------------------
def test_encode_key_order_and_empty_headers():
    raw = encode(make_env())
    assert raw == b'{"msg_id":"m1","agent_id":"a","from":"x","to":"y","sent_at":1,"body":"hi","headers":{}}'
    assert list(json.loads(raw)) == ["msg_id", "agent_id", "from", "to", "sent_at", "body", "headers"]
    assert not raw.endswith(b"\n")


def test_unicode_and_newlines_roundtrip():
    env = make_env(body="line1\nline2 · ünïcødé 🌱", headers={"k": "v\n"})
    assert decode(encode(env)) == env


def test_decode_missing_key_named():
    with pytest.raises(MalformedPayloadError) as ei:
        decode(b"{}")
    assert "msg_id" in str(ei.value)
    assert ei.value.key == "msg_id"
    obj = json.loads(encode(make_env()))
    del obj["sent_at"]
    with pytest.raises(MalformedPayloadError, match="sent_at"):
        decode(json.dumps(obj))


def test_decode_ignores_extra_keys():
    obj = json.loads(encode(make_env()))
    obj["qos"] = 1
    assert decode(json.dumps(obj).encode()) == make_env()


@pytest.mark.parametrize("payload", [b"not json", b"[1,2]", b"\xff\xfe", b'{"msg_id":"m","agent_id":"a","from":"x","to":"y/z","sent_at":1,"body":""}'])
def test_decode_malformed(payload):
    with pytest.raises(MalformedPayloadError):
        decode(payload)


def test_large_body_roundtrip():
    env = make_env(body="x" * (1 << 20))
    assert decode(encode(env)) == env


def test_randomized_roundtrip_bit_exact():
    rng = random.Random(1234)
    for _ in range(1000):
        env = random_envelope(rng)
        raw = encode(env)
        back = decode(raw)
        assert back == env
        assert encode(back) == raw


@settings(max_examples=200)
@given(
    body=st.text(),
    headers=st.dictionaries(st.text(), st.text(), max_size=4),
    sent_at=st.integers(min_value=0, max_value=2**62),
)
def test_roundtrip_property(body, headers, sent_at):
    env = make_env(body=body, headers=headers, sent_at=sent_at)
    assert decode(encode(env)) == env


# -- routing ---------------------------------------------------------------------------
def test_publish_delivers_identical_envelope():
    bus = Bus("a")
    sub = bus.subscribe("y")
    env = make_env()
    receipt = bus.publish(env)
    assert receipt.msg_id == "m1" and receipt.delivered
    assert sub.get_nowait() == env


def test_publish_to_missing_module_counts_drop():
    bus = Bus("a")
    r = bus.send("x", "ghost", "hello")
    assert not r.delivered
    assert bus.counters.dropped == 1
    assert bus.conservation_holds()


def test_duplicate_subscription_rejected():
    bus = Bus("a")
    bus.subscribe("m")
    with pytest.raises(DuplicateSubscriptionError):
        bus.subscribe("m")


def test_resubscribe_after_close():
    bus = Bus("a")
    bus.subscribe("m").close()
    bus.subscribe("m")


def test_stopped_bus_refuses_publish():
    bus = Bus("a")
    bus.stop()
    with pytest.raises(BusStoppedError):
        bus.send("x", "y", "z")


def test_msg_ids_unique_and_seeded():
    a = Bus("a", rng=random.Random(5))
    b = Bus("a", rng=random.Random(5))
    ids = [a.new_msg_id() for _ in range(500)]
    assert len(set(ids)) == 500
    assert ids == [b.new_msg_id() for _ in range(500)]


def test_per_sender_fifo_interleaved():
    bus = Bus("a")
    sub = bus.subscribe("B")
    rng = random.Random(7)
    plan = ["A"] * 100 + ["C"] * 100
    rng.shuffle(plan)
    seq = {"A": 0, "C": 0}
    for sender in plan:
        bus.send(sender, "B", str(seq[sender]))
        seq[sender] += 1
    got = sub.drain()
    for sender in "AC":
        assert [int(e.body) for e in got if e.from_module == sender] == list(range(100))


def test_concurrent_async_senders_keep_fifo():
    async def main():
        bus = Bus("a")
        sub = bus.subscribe("B")

        async def sender(name):
            for i in range(100):
                bus.send(name, "B", str(i))
                if i % 7 == 0:
                    await asyncio.sleep(0)

        await asyncio.gather(sender("A"), sender("C"))
        got = sub.drain()
        return [[int(e.body) for e in got if e.from_module == s] for s in "AC"]

    a, c = run_virtual(main)
    assert a == list(range(100)) and c == list(range(100))


def test_overflow_drops_oldest_and_conserves():
    bus = Bus("a", queue_size=4)
    sub = bus.subscribe("B")
    for i in range(10):
        bus.send("A", "B", str(i))
    assert [e.body for e in sub.drain()] == ["6", "7", "8", "9"]
    c = bus.counters
    assert (c.published, c.delivered, c.dropped) == (10, 4, 6)
    assert bus.conservation_holds()


def test_stalled_subscriber_does_not_block_publishers():
    bus = Bus("a", queue_size=1024)
    bus.subscribe("stalled")
    fast = bus.subscribe("fast")
    worst = 0.0
    for i in range(5000):
        t = time.perf_counter()
        bus.send("p", "stalled", "x" * 100)
        bus.send("p", "fast", str(i))
        worst = max(worst, time.perf_counter() - t)
        fast.drain()
    assert worst < 0.1
    assert bus.conservation_holds()


def test_conservation_after_quiescence_randomized():
    rng = random.Random(3)
    bus = Bus("a", queue_size=16)
    subs = {n: bus.subscribe(n) for n in "xyz"}
    for _ in range(2000):
        r = rng.random()
        if r < 0.7:
            bus.send("s", rng.choice("xyzw"), "b")
        else:
            subs[rng.choice("xyz")].drain(rng.randint(1, 5))
    for s in subs.values():
        s.drain()
    c = bus.counters
    assert c.published == c.delivered + c.dropped


def test_async_get_wakes_on_publish():
    async def main():
        bus = Bus("a")
        sub = bus.subscribe("m")

        async def later():
            await asyncio.sleep(1)
            bus.send("x", "m", "ping")

        asyncio.get_running_loop().create_task(later())
        env = await asyncio.wait_for(sub.get(), 5)
        return env.body

    assert run_virtual(main) == "ping"


def test_close_wakes_waiter_with_stop():
    async def main():
        bus = Bus("a")
        sub = bus.subscribe("m")
        task = asyncio.get_running_loop().create_task(sub.wait_nonempty())
        await asyncio.sleep(0)
        bus.stop()
        with pytest.raises(BusStoppedError):
            await task
        return True

    assert run_virtual(main)


def test_taps_see_encoded_payload_and_failures_are_contained():
    bus = Bus("a")
    seen = []
    bus.add_tap(lambda env, raw: seen.append(raw))
    bus.add_tap(lambda env, raw: 1 / 0)
    bus.subscribe("y")
    env = make_env()
    assert bus.publish(env).delivered
    assert seen == [encode(env)]
    bus.inject(make_env(msg_id="m2"))
    assert len(seen) == 1
