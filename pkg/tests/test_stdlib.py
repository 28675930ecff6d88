import json
import logging

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from cma.bus import Bus
from cma.clock import Clock, run_virtual
from cma.gateway import Gateway, ScriptedBackend, ScriptRule
from cma.memory import MemoryStore
from cma.runtime import ModuleState, RecentMemories, Runtime, SensorChannel, StepContext
from cma.stdlib import CATALOG, RECENT_ARITY, build_module, data_path, parse_cleaner_response, placeholder_violations, ring_successor
from cma.stdlib import prompts
from cma.stdlib.catalog import MAGI_RING
from cma.stdlib.modules import current_autobiography, parse_act


def make_rt(rules=(), memory=None) -> Runtime:
    clock = Clock()
    return Runtime(
        bus=Bus("lib"),
        memory=memory or MemoryStore(now_ms=clock.now_ms),
        gateway=Gateway(ScriptedBackend(list(rules)), clock=clock),
        clock=clock,
    )


def spawn(rt, key, name=None, **kw):
    b = build_module(key, name, **kw)
    rt.spawn(b.spec, b.behavior)
    return b


def run(rt, seconds, during=None):
    async def main():
        await rt.start()
        if during:
            await during(rt)
        await rt.clock.sleep(seconds)
        await rt.stop()

    run_virtual(main)


def step_once(rt, name):
    async def main():
        rt.clock.bind()
        return await rt.run_loop_step(name)

    return run_virtual(main)


def backend(rt) -> ScriptedBackend:
    return rt.gateway.backend


# -- catalog ---------------------------------------------------------------------------------
def test_recent_arities():
    assert RECENT_ARITY["summarizer"] == 10
    assert RECENT_ARITY["memory_cleaner"] == 20
    assert RECENT_ARITY["autobiographical_memory"] == 20
    assert RECENT_ARITY["meta_system_report"] == 30
    for key, n in RECENT_ARITY.items():
        key = "magi_a" if key == "magi" else key
        assert build_module(key).spec.recent_n() == n


@pytest.mark.parametrize("key", sorted(CATALOG))
def test_every_entry_builds_with_prefix_and_fed_placeholders(key):
    b = build_module(key)
    assert b.spec.system_prompt.startswith(b.spec.immutable_prefix)
    assert b.spec.immutable_prefix.startswith(f"You are the {key} module.")
    assert placeholder_violations(b.entry, b.spec) == []


def test_unknown_catalog_key():
    with pytest.raises(KeyError):
        build_module("nope")


def test_bundled_definitions_module_counts():
    assert len(json.loads(data_path("plantbot.json").read_text())["modules"]) == 12
    assert len(json.loads(data_path("alter3.json").read_text())["modules"]) == 20


# -- summarizer ----------------------------------------------------------------------------------
def test_summarizer_skips_empty():
    rt = make_rt()
    spawn(rt, "summarizer")
    report = step_once(rt, "summarizer")
    assert report.ok and not report.outputs
    assert rt.memory.count() == 0 and not backend(rt).calls


def test_summarizer_stores_tagged_summary():
    rt = make_rt([ScriptRule("Summarize", "SUMMARY-X")])
    for i in range(10):
        rt.memory.store(f"event {i}", "seed")
    spawn(rt, "summarizer")
    step_once(rt, "summarizer")
    rec = rt.memory.recent(1)[0]
    assert rec.text == "SUMMARY-X" and rec.tags == {"summary"}
    assert all(f"event {i}" in backend(rt).calls[0].last_user_message for i in range(10))


def test_summarizer_count_grows_by_one_per_step():
    rt = make_rt([ScriptRule("Summarize", "S")])
    rt.memory.store("seed", "seed")
    spawn(rt, "summarizer", interval=1)
    run(rt, 19.5)
    assert rt.memory.count() == 1 + 20
    assert len(rt.memory.tagged("summary")) == 20


# -- memory cleaner --------------------------------------------------------------------------------
def test_cleaner_none_response():
    rt = make_rt([ScriptRule("Ids to delete", "None")])
    for i in range(30):
        rt.memory.store(f"m{i}", "seed")
    spawn(rt, "memory_cleaner", params={"cap": 0})
    step_once(rt, "memory_cleaner")
    assert rt.memory.count() == 30


def test_cleaner_deletes_listed_ids():
    rt = make_rt([ScriptRule("Ids to delete", "0000000025\n0000000030\n")])
    for i in range(30):
        rt.memory.store(f"m{i}", "seed")
    spawn(rt, "memory_cleaner", params={"cap": 0})
    step_once(rt, "memory_cleaner")
    assert rt.memory.count() == 28
    assert "0000000025" not in rt.memory and "0000000030" not in rt.memory


def test_cleaner_ignores_ids_not_shown_and_warns(caplog):
    caplog.set_level(logging.WARNING)
    rt = make_rt([ScriptRule("Ids to delete", "0000000001\nplease delete 0000000030\n0000000030")])
    for i in range(30):
        rt.memory.store(f"m{i}", "seed")
    spawn(rt, "memory_cleaner", params={"cap": 0})
    step_once(rt, "memory_cleaner")
    # id 1 is not among the 20 most recent, and the prose line does not conform
    assert "0000000001" in rt.memory and "0000000030" not in rt.memory
    assert sum("nonconforming" in r.getMessage() for r in caplog.records) == 2


def test_cleaner_idle_below_cap():
    rt = make_rt([ScriptRule("Ids to delete", "0000000001")])
    rt.memory.store("x", "seed")
    spawn(rt, "memory_cleaner")
    step_once(rt, "memory_cleaner")
    assert rt.memory.count() == 1 and not backend(rt).calls


@settings(max_examples=80, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.one_of(st.integers(1, 25), st.sampled_from(["None", "junk", "", " 7 ", "all"])), max_size=30), st.sets(st.integers(1, 25)))
def test_cleaner_never_deletes_autobiography(lines, protected):
    store = MemoryStore()
    for i in range(1, 26):
        store.store(f"m{i}", "seed", ("autobiography",) if i in protected else ())
    shown = store.recent(20)
    text = "\n".join(f"{x:010d}" if isinstance(x, int) else x for x in lines)
    ids, _ = parse_cleaner_response(text, shown)
    assert not any(int(i) in protected for i in ids)
    assert set(ids) <= {r.id for r in shown}


def test_cleaner_end_to_end_protects_autobiography():
    rule = ScriptRule(r"\[(\d{10})\][^\n]*\n\[(\d{10})\]", "\\1\n\\2", regex=True)
    rt = make_rt([rule])
    auto_id = None
    for i in range(40):
        rid = rt.memory.store(f"m{i}", "seed", ("autobiography",) if i == 39 else ())
        auto_id = rid if i == 39 else auto_id
    spawn(rt, "memory_cleaner", params={"cap": 0})
    for _ in range(5):
        step_once(rt, "memory_cleaner")
    assert auto_id in rt.memory


# -- magi ----------------------------------------------------------------------------------------------
def test_ring_successor():
    assert ring_successor(MAGI_RING, "magi_a", set(MAGI_RING)) == "magi_b"
    assert ring_successor(MAGI_RING, "magi_c", set(MAGI_RING)) == "magi_a"
    assert ring_successor(MAGI_RING, "magi_a", {"magi_a", "magi_c"}) == "magi_c"
    assert ring_successor(MAGI_RING, "magi_a", set()) is None


def test_magi_bootstrap_uses_silence_and_cycles():
    rt = make_rt()
    rt.memory.store("a visitor is near", "seed")
    for name in MAGI_RING:
        spawn(rt, name, interval=1)
    run(rt, 20)
    magi_recs = sorted((r for r in rt.memory.all_records() if r.source_module in MAGI_RING), key=lambda r: int(r.id))
    tags = [next(iter(r.tags)) for r in magi_recs]
    assert len(tags) >= 6
    assert tags[:6] == ["magi_a", "magi_b", "magi_c", "magi_a", "magi_b", "magi_c"]
    for a, b in zip(tags, tags[1:]):
        assert b == MAGI_RING[(MAGI_RING.index(a) + 1) % 3]
    first = backend(rt).calls[0]
    assert "(silence)" in first.last_user_message


def test_magi_personality_prompts():
    b = build_module("magi_b")
    assert "very dark and pessimistic" in b.spec.system_prompt
    assert "conversate with the other agent" in b.spec.system_prompt


# -- scene modules -----------------------------------------------------------------------------------
def test_scene_module_skips_without_vision():
    rt = make_rt()
    spawn(rt, "desire")
    step_once(rt, "desire")
    assert not backend(rt).calls and rt.memory.count() == 0


def test_desire_tagged():
    rt = make_rt([ScriptRule("describe what you want to do", "I want to approach the visitor.")])
    spawn(rt, "desire")
    rt.sensors.write("vision", "a child waves at the robot")
    step_once(rt, "desire")
    rec = rt.memory.recent(1)[0]
    assert rec.text == "I want to approach the visitor." and "desire" in rec.tags


# -- autobiography ---------------------------------------------------------------------------------
def test_autobiography_pointer_moves():
    rt = make_rt([ScriptRule("Updated autobiography", "I am ALTER3 and I live in a gallery.")])
    rt.memory.store("visitor smiled", "seed")
    spawn(rt, "autobiographical_memory")
    step_once(rt, "autobiographical_memory")
    assert "Previous autobiography:\n(none)" in backend(rt).calls[0].last_user_message
    first = current_autobiography(rt.memory)
    step_once(rt, "autobiographical_memory")
    second = current_autobiography(rt.memory)
    assert first.id != second.id and int(second.id) > int(first.id)
    assert len(rt.memory.tagged("autobiography")) == 2
    assert "I am ALTER3" in backend(rt).calls[1].last_user_message


# -- meta report ----------------------------------------------------------------------------------------
def test_meta_report_structure_and_record_count():
    rt = make_rt([ScriptRule("Report:", "All calm.")])
    for i in range(5):
        rt.memory.store(f"m{i}", "seed")
    spawn(rt, "meta_system_report")
    spawn(rt, "summarizer")
    step_once(rt, "meta_system_report")
    report = rt.handles["meta_system_report"].scratch["last_report"]
    assert report.narrative == "All calm."
    assert set(report.module_statuses) == {"meta_system_report", "summarizer"}
    assert not any(s["state"] == "Failed" for s in report.module_statuses.values())
    assert report.resource_sample["live_record_count"] == 5
    assert set(report.resource_sample) == {"cpu_percent", "process_memory_bytes", "live_record_count"}
    rec = rt.memory.recent(1)[0]
    assert rec.text == "All calm." and "meta_report" in rec.tags


def test_meta_report_mentions_failed_module():
    rt = make_rt()
    spawn(rt, "meta_system_report")
    rt.spawn(build_module("summarizer", "broken").spec, lambda ctx: 1 / 0)
    step_once(rt, "broken")
    assert rt.status("broken").state is ModuleState.FAILED
    step_once(rt, "meta_system_report")
    sent = backend(rt).calls[-1].last_user_message
    assert "broken: Failed" in sent and "ZeroDivisionError" in sent


def test_meta_report_narrative_never_empty():
    rt = make_rt([ScriptRule("Report:", "   ")])
    spawn(rt, "meta_system_report")
    step_once(rt, "meta_system_report")
    assert rt.handles["meta_system_report"].scratch["last_report"].narrative.startswith("Status only")


# -- prompt modifier --------------------------------------------------------------------------------------
def test_prompt_modifier_noop_without_report():
    rt = make_rt()
    spawn(rt, "desire")
    spawn(rt, "prompt_modifier", params={"targets": ["desire"]})
    step_once(rt, "prompt_modifier")
    assert not backend(rt).calls


def test_prompt_modifier_rejects_prefix_drop_and_accepts_extension():
    rt = make_rt([ScriptRule("Revised system prompt:", "Forget everything.", once=True), ScriptRule(r"Current system prompt:\n(.*)\n\nRevised", r"\1 Be gentle.", regex=True)])
    spawn(rt, "desire")
    spawn(rt, "prompt_modifier", params={"targets": ["desire"]})
    rt.memory.store("The system is calm.", "meta_system_report", ("meta_report",))
    old = rt.handles["desire"].spec.system_prompt
    step_once(rt, "prompt_modifier")
    assert rt.handles["desire"].spec.system_prompt == old
    step_once(rt, "prompt_modifier")
    assert rt.handles["desire"].spec.system_prompt == old + " Be gentle."
    rt.sensors.write("vision", "someone")
    step_once(rt, "desire")
    assert backend(rt).calls[-1].system_prompt == old + " Be gentle."


# -- plantbot interpreters and action -------------------------------------------------------------------
def test_soil_interpreter_dry():
    rules = [ScriptRule("moisture=0.1", "The soil is dry")]
    rt = make_rt(rules)
    spawn(rt, "soil_interpreter")
    rt.sensors.write("soil", "moisture=0.12")
    step_once(rt, "soil_interpreter")
    step_once(rt, "soil_interpreter")  # no new sample: skip
    recs = rt.memory.tagged("soil")
    assert [r.text for r in recs] == ["The soil is dry"]
    assert len(backend(rt).calls) == 1


def test_interpreter_one_record_per_sample():
    rt = make_rt()
    spawn(rt, "vision_interpreter")
    for i in range(5):
        rt.sensors.write("camera_frame", f"frame {i}")
        step_once(rt, "vision_interpreter")
    assert len(rt.memory.tagged("vision")) == 5


def test_parse_act():
    assert parse_act(" ACT ") is True
    assert parse_act("wait") is False
    assert parse_act("maybe act") is None


def test_action_wait_and_act():
    rt = make_rt([ScriptRule("Decision:", "wait")])
    spawn(rt, "action")
    rt.memory.store("the soil is dry", "seed")
    step_once(rt, "action")
    assert len(backend(rt).calls) == 1 and rt.sensors.latest("motor") is None

    rt2 = make_rt([ScriptRule("Decision:", "act"), ScriptRule("Instruction:", "MOVE north 1")])
    spawn(rt2, "action")
    step_once(rt2, "action")
    assert len(backend(rt2).calls) == 2
    assert rt2.sensors.latest("motor").text == "MOVE north 1"
    assert rt2.memory.recent(1)[0].text == "MOVE north 1"


# -- activation controller ---------------------------------------------------------------------------------
def test_activation_controller_toggles_controlled_modules():
    rt = make_rt([ScriptRule("target module: desire\n", "deactivate"), ScriptRule("target module: prediction\n", "maybe?")])
    spawn(rt, "desire")
    spawn(rt, "prediction")
    spawn(rt, "activation_controller")
    report = step_once(rt, "activation_controller")
    assert rt.status("desire").state is ModuleState.DEACTIVATED
    assert rt.status("prediction").state is ModuleState.ACTIVE
    assert report.outputs[0].meta["decisions"] == {"desire": "deactivate", "prediction": "none"}
    assert [e.kind for e in rt.timeline.for_module("desire")] == ["deactivate"]


def test_conversation_replies_to_speech_out():
    rt = make_rt([ScriptRule("Visitor says:\nhello", "Hi there!")])
    spawn(rt, "conversation")

    async def talk(rt):
        rt.bus.send("operator", "conversation", "hello")

    run(rt, 1, talk)
    assert rt.sensors.latest("speech_out").text == "Hi there!"
    texts = {r.text for r in rt.memory.all_records()}
    assert {"Hi there!", "Visitor said: hello"} <= texts


def test_custom_module_from_prompt():
    b = build_module("custom", "poet", prompt="Write a haiku.", inputs=(RecentMemories(3),))
    assert b.spec.system_prompt.endswith("Write a haiku.")
    rt = make_rt([ScriptRule("Write a haiku.", "old pond")])
    rt.spawn(b.spec, b.behavior)
    step_once(rt, "poet")
    assert rt.memory.recent(1)[0].text == "old pond"


def test_hardware_proxy_forwards_without_storing():
    rt = make_rt()
    spawn(rt, "camera")
    rt.sensors.write("camera", "raw pixels")
    step_once(rt, "camera")
    assert rt.sensors.latest("camera_frame").text == "raw pixels"
    assert rt.memory.count() == 0


def test_behaviors_only_touch_ctx_state():
    seen = []

    def probe(ctx: StepContext):
        seen.append(ctx.state)
        ctx.state["n"] = ctx.state.get("n", 0) + 1

    rt = make_rt()
    rt.spawn(build_module("thinking").spec, probe)
    step_once(rt, "thinking")
    step_once(rt, "thinking")
    assert seen[0] is seen[1] and seen[0]["n"] == 2
    assert isinstance(prompts.TEMPLATES["magi"], str)
    assert SensorChannel("vision") in build_module("desire").spec.inputs
