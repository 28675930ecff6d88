import asyncio
import json
import logging

import pytest

from cma.bus import Bus
from cma.clock import Clock, run_virtual
from cma.errors import DuplicateModuleError, GatewayError
from cma.gateway import EchoBackend, Gateway, ScriptedBackend, ScriptRule
from cma.memory import MemoryStore
from cma.runtime import (
    LEGAL_TRANSITIONS,
    ActivationDecision,
    ActivationPolicy,
    Both,
    ModuleSpec,
    ModuleState,
    OnMessage,
    Output,
    PeerOutput,
    QueryMemories,
    RecentMemories,
    Runtime,
    SendTo,
    SensorChannel,
    StoreMemory,
    SupervisorPolicy,
    Tick,
    activation_decide,
    parse_activation,
)
from cma.timeline import ModuleLog, read_module_logs
from oracles import ACTIVATION_TABLE, backoff_schedule


def make_runtime(backend=None, log_dir=None) -> Runtime:
    clock = Clock()
    return Runtime(
        bus=Bus("t"),
        memory=MemoryStore(now_ms=clock.now_ms),
        gateway=Gateway(backend or EchoBackend(), clock=clock),
        clock=clock,
        log=ModuleLog(log_dir, fresh=True) if log_dir else None,
    )


def run_for(rt: Runtime, seconds: float, during=None):
    async def main():
        await rt.start()
        if during is not None:
            await during(rt)
        await rt.clock.sleep(seconds)
        await rt.stop()

    run_virtual(main)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModuleSpec("m", trigger=Tick(0.005))
    with pytest.raises(ValueError):
        ModuleSpec("m", system_prompt="abc", immutable_prefix="x")
    with pytest.raises(ValueError):
        ModuleSpec("a/b")
    with pytest.raises(ValueError):
        ModuleSpec("m", inputs=[RecentMemories(0)])


def test_duplicate_spawn_rejected():
    rt = make_runtime()
    rt.spawn(ModuleSpec("m"), lambda ctx: None)
    with pytest.raises(DuplicateModuleError):
        rt.spawn(ModuleSpec("m"), lambda ctx: None)


def test_empty_input_step_completes():
    rt = make_runtime()
    seen = []
    rt.spawn(ModuleSpec("m", trigger=Tick(1), inputs=[RecentMemories(10)]), lambda ctx: seen.append(list(ctx.memories)))
    run_for(rt, 0.5)
    assert seen and seen[0] == []
    assert rt.status("m").state is ModuleState.STOPPED
    assert [e.kind for e in rt.timeline.for_module("m")] == ["step"]


def test_tick_cadence_under_virtual_clock():
    rt = make_runtime()
    rt.spawn(ModuleSpec("m", trigger=Tick(2)), lambda ctx: "x")
    run_for(rt, 10.5)
    steps = rt.timeline.for_module("m", "step")
    assert len(steps) == 6
    assert [b.ts - a.ts for a, b in zip(steps, steps[1:])] == [2000] * 5


def test_crash_on_third_step_restarts_after_250ms():
    rt = make_runtime()
    calls = {"n": 0}

    def flaky(ctx):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("boom")
        return "fine"

    rt.spawn(ModuleSpec("flaky", trigger=Tick(1)), flaky)
    rt.spawn(ModuleSpec("sib", trigger=Tick(1), outputs=[StoreMemory()]), lambda ctx: "sib output")
    run_for(rt, 6)
    events = rt.timeline.for_module("flaky")
    kinds = [e.kind for e in events]
    fail = kinds.index("fail")
    assert kinds[fail + 1] == "restart"
    assert events[fail + 1].ts - events[fail].ts == 250
    h = rt.handles["flaky"]
    assert h.restarts == 1 and h.last_error == "RuntimeError: boom"
    sib_steps = rt.timeline.for_module("sib", "step")
    assert len(sib_steps) == 6
    assert rt.handles["sib"].last_output_at == sib_steps[-1].ts


def test_backoff_grows_and_caps():
    rt = make_runtime()

    def always(ctx):
        raise ValueError("nope")

    rt.spawn(ModuleSpec("bad", trigger=Tick(1)), always)
    run_for(rt, 60)
    ev = rt.timeline.for_module("bad")
    fails = [e.ts for e in ev if e.kind == "fail"]
    restarts = [e.ts for e in ev if e.kind == "restart"]
    gaps = [(r - f) / 1000 for f, r in zip(fails, restarts)]
    assert gaps == backoff_schedule(len(gaps))
    assert gaps[-1] == 10.0


def test_restart_budget_exhaustion_alerts():
    rt = make_runtime()

    def always(ctx):
        raise ValueError("nope")

    policy = SupervisorPolicy(base=0.01, factor=1.0, max_restarts_per_hour=5)
    rt.spawn(ModuleSpec("bad", trigger=Tick(1), supervisor=policy), always)
    run_for(rt, 5)
    h = rt.handles["bad"]
    assert h.restarts == 5 and h.gave_up
    assert rt.alerts and "bad" in rt.alerts[0]


def test_no_restart_policy():
    rt = make_runtime()
    rt.spawn(ModuleSpec("bad", trigger=Tick(1), supervisor=SupervisorPolicy(restart=False)), lambda ctx: 1 / 0)
    run_for(rt, 5)
    assert rt.handles["bad"].restarts == 0


def test_on_message_processed_exactly_once():
    rt = make_runtime()
    got = []
    rt.spawn(ModuleSpec("rx", trigger=OnMessage()), lambda ctx: got.append([e.body for e in ctx.inbox]))

    async def send(rt):
        await asyncio.sleep(0)
        rt.bus.send("tx", "rx", "hello")

    run_for(rt, 5, send)
    assert got == [["hello"]]


def test_inbox_drain_cap():
    rt = make_runtime()
    sizes = []
    rt.spawn(ModuleSpec("rx", trigger=OnMessage()), lambda ctx: sizes.append(len(ctx.inbox)))

    async def flood(rt):
        for i in range(40):
            rt.bus.send("tx", "rx", str(i))

    run_for(rt, 1, flood)
    assert sizes == [16, 16, 8]


def test_both_trigger_steps_on_tick_and_message():
    rt = make_runtime()
    ts = []
    rt.spawn(ModuleSpec("m", trigger=Both(10)), lambda ctx: ts.append((rt.clock.now(), len(ctx.inbox))))

    async def poke(rt):
        await rt.clock.sleep(3)
        rt.bus.send("x", "m", "hi")

    run_for(rt, 12, poke)
    assert [n for _, n in ts] == [0, 1, 0]


def test_outputs_applied_store_send_sensor():
    rt = make_runtime()
    spec = ModuleSpec(
        "src",
        trigger=Tick(100),
        outputs=[StoreMemory(("note",)), SendTo("dst"), SensorChannel("speech_out")],
    )
    rt.spawn(spec, lambda ctx: Output("spoken", tags=("extra",)))
    dst = []
    rt.spawn(ModuleSpec("dst", trigger=OnMessage()), lambda ctx: dst.extend(e.body for e in ctx.inbox))
    run_for(rt, 1)
    rec = rt.memory.recent(1)[0]
    assert rec.text == "spoken" and rec.tags == {"note", "extra"} and rec.source_module == "src"
    assert dst == ["spoken"]
    assert rt.sensors.latest("speech_out").text == "spoken"


def test_query_and_peer_inputs():
    rt = make_runtime()
    rt.memory.store("the soil is dry", "seed")
    rt.memory.store("music plays", "seed")
    seen = {}

    def reader(ctx):
        seen["q"] = [h.record.text for h in ctx.queried]
        seen["peer"] = ctx.peers.get("talker")

    rt.spawn(ModuleSpec("talker", trigger=Tick(1)), lambda ctx: "I said this")
    rt.spawn(ModuleSpec("reader", trigger=OnMessage(), inputs=[QueryMemories("{inbox}", 1), PeerOutput("talker")]), reader)

    async def ask(rt):
        await rt.clock.sleep(0.5)
        rt.bus.send("x", "reader", "dry soil")

    run_for(rt, 1, ask)
    assert seen == {"q": ["the soil is dry"], "peer": "I said this"}


def test_failure_is_logged_and_siblings_unaffected(tmp_path):
    rt = make_runtime(log_dir=tmp_path)
    rt.spawn(ModuleSpec("bad", trigger=Tick(1)), lambda ctx: 1 / 0)
    rt.spawn(ModuleSpec("good", trigger=Tick(1)), lambda ctx: "ok")
    run_for(rt, 3.5)
    lines = read_module_logs(tmp_path)
    bad = [x["event"] for x in lines if x["module"] == "bad"]
    assert bad[:3] == ["fail", "restart", "fail"]
    assert sum(1 for x in lines if x["module"] == "good" and x["event"] == "step") == 4
    for line in (tmp_path / "good.jsonl").read_text().splitlines():
        assert set(json.loads(line)) >= {"ts", "module", "state", "event", "output_summary"}


def test_transition_history_is_legal():
    rt = make_runtime()
    n = {"i": 0}

    def sometimes(ctx):
        n["i"] += 1
        if n["i"] % 3 == 0:
            raise RuntimeError("x")

    rt.spawn(ModuleSpec("c", trigger=Tick(1), activation_policy=ActivationPolicy.CONTROLLED), sometimes)

    async def toggle(rt):
        for d in [ActivationDecision.DEACTIVATE, ActivationDecision.ACTIVATE] * 5:
            await rt.clock.sleep(1.3)
            rt.set_activation("c", d)

    run_for(rt, 2, toggle)
    hist = rt.handles["c"].history
    assert hist
    assert all((old, new) in LEGAL_TRANSITIONS for _, old, new in hist)


def test_set_activation_semantics():
    rt = make_runtime()
    rt.spawn(ModuleSpec("c", activation_policy="controlled", initially_active=False), lambda ctx: None)
    assert rt.status("c").state is ModuleState.DEACTIVATED
    assert rt.set_activation("c", ActivationDecision.NO_CHANGE).state is ModuleState.DEACTIVATED
    assert rt.set_activation("c", ActivationDecision.DEACTIVATE).state is ModuleState.DEACTIVATED
    assert rt.set_activation("c", ActivationDecision.ACTIVATE).state is ModuleState.ACTIVE
    assert rt.set_activation("c", ActivationDecision.ACTIVATE).state is ModuleState.ACTIVE
    assert rt.set_activation("c", ActivationDecision.DEACTIVATE).state is ModuleState.DEACTIVATED


def test_deactivated_module_does_not_step_and_buffers_inbox():
    rt = make_runtime()
    got = []
    rt.spawn(ModuleSpec("c", trigger=OnMessage(), activation_policy="controlled", initially_active=False), lambda ctx: got.extend(e.body for e in ctx.inbox))

    async def scenario(rt):
        rt.bus.send("x", "c", "held")
        await rt.clock.sleep(2)
        assert got == []
        rt.set_activation("c", ActivationDecision.ACTIVATE)

    run_for(rt, 1, scenario)
    assert got == ["held"]


def test_kill_injects_failure_and_restart():
    rt = make_runtime()
    rt.spawn(ModuleSpec("m", trigger=Tick(1)), lambda ctx: "x")

    async def kill(rt):
        await rt.clock.sleep(2.5)
        assert rt.kill("m")

    run_for(rt, 2, kill)
    kinds = [e.kind for e in rt.timeline.for_module("m")]
    assert "fail" in kinds and kinds[kinds.index("fail") + 1] == "restart"
    assert rt.handles["m"].restarts == 1


# -- activation parsing ------------------------------------------------------------------------------
@pytest.mark.parametrize("raw,expected", ACTIVATION_TABLE)
def test_parse_activation_table(raw, expected):
    decision = parse_activation(raw)
    assert (decision.value if decision else "none") == expected


def _decide(response_text=None, error=None):
    class B:
        name = "b"

        async def send(self, request):
            if error:
                raise error
            return response_text

    target = ModuleSpec("desire", system_prompt="You want things.")

    async def main():
        Clock().bind()
        return await activation_decide(target, [], Gateway(B()))

    return run_virtual(main)


def test_activation_decide_warns_once_per_nonconforming(caplog):
    caplog.set_level(logging.WARNING, logger="cma.runtime")
    assert _decide("activate") is ActivationDecision.ACTIVATE
    assert _decide("None") is ActivationDecision.NO_CHANGE
    assert not caplog.records
    assert _decide("I think we should probably activate it") is ActivationDecision.NO_CHANGE
    assert len(caplog.records) == 1 and "nonconforming" in caplog.records[0].getMessage()


def test_activation_gateway_error_is_no_change():
    assert _decide(error=GatewayError("down")) is ActivationDecision.NO_CHANGE


def test_activation_prompt_contains_target_prompt():
    backend = ScriptedBackend([ScriptRule("You want things.", "deactivate")])

    async def main():
        Clock().bind()
        return await activation_decide(ModuleSpec("desire", system_prompt="You want things."), [], Gateway(backend))

    assert run_virtual(main) is ActivationDecision.DEACTIVATE
    req = backend.calls[0]
    assert "Output should be only the activate or deactivate" in req.system_prompt
    assert "target module: desire" in req.last_user_message


# -- prompt revisions --------------------------------------------------------------------------------
def test_update_prompt_guard():
    rt = make_runtime()
    prefix = "You are m. "
    rt.spawn(ModuleSpec("m", system_prompt=prefix + "Be brief.", immutable_prefix=prefix), lambda ctx: None)
    assert rt.update_prompt("m", "Dropped prefix") is None
    assert rt.update_prompt("m", prefix + "x" * 200) is None
    rev = rt.update_prompt("m", prefix + "Be brief and kind.", reason="test")
    assert rev is not None and rt.handles["m"].spec.system_prompt == prefix + "Be brief and kind."
    assert rt.revisions == [rev]


def test_revised_prompt_used_next_step():
    backend = ScriptedBackend()
    rt = make_runtime(backend)

    async def ask(ctx):
        return await ctx.ask("hi")

    rt.spawn(ModuleSpec("m", system_prompt="P: old", immutable_prefix="P:", trigger=Tick(1)), ask)

    async def revise(rt):
        await rt.clock.sleep(0.5)
        rt.update_prompt("m", "P: new")

    run_for(rt, 1, revise)
    assert [c.system_prompt for c in backend.calls] == ["P: old", "P: new"]
