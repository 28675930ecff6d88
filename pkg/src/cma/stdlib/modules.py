"""Behaviors of the built-in modules.

Every factory takes the module's ``params`` mapping and returns an async
behavior ``(StepContext) -> Output | list[Output] | None``. Behaviors keep no
state outside ``ctx.state`` and reach other modules only through memory, the
bus, sensor channels and the runtime's status view.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Mapping, Sequence

from ..memory import MemoryRecord, MemoryStore
from ..runtime import (
    ModuleState,
    Output,
    PromptRevision,
    StepContext,
    activation_decide,
)
from . import prompts

logger = logging.getLogger(__name__)

NONE_MARKERS = frozenset({"none", "(none)", ""})
PROTECTED_TAG = "autobiography"


class _Blank(dict):
    def __missing__(self, key: str) -> str:
        return ""


def render(template: str, **fields: Any) -> str:
    return template.format_map(_Blank(fields))


def template_fields(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name}


def fmt_memories(records: Iterable[MemoryRecord], *, with_ids: bool = False) -> str:
    lines = [f"[{r.id}] {r.text}" if with_ids else f"- {r.text}" for r in records]
    return "\n".join(lines) if lines else "(no memories)"


def current_autobiography(memory: MemoryStore) -> MemoryRecord | None:
    """The pointer to the current autobiography: the newest record so tagged."""
    found = memory.tagged(PROTECTED_TAG, 1)
    return found[0] if found else None


def _scene(ctx: StepContext, channel: str = "vision") -> str | None:
    sample = ctx.sensors.get(channel)
    return sample.text if sample is not None else None


# -------------------------------------------------------------- base layer --
def summarizer(params: Mapping[str, Any]):
    async def step(ctx: StepContext):
        if not ctx.memories:
            return None
        text = await ctx.ask(render(prompts.TEMPLATES["summarizer"], memories=fmt_memories(ctx.memories)))
        return Output(text)

    return step


def parse_cleaner_response(text: str, shown: Sequence[MemoryRecord]) -> tuple[list[str], list[str]]:
    """Return (ids to delete, nonconforming lines).

    A line counts only if, once stripped, it equals one of the shown ids.
    Autobiography records are never selected.
    """
    shown_ids = {r.id: r for r in shown}
    chosen: list[str] = []
    bad: list[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if line.lower() in NONE_MARKERS:
            continue
        rec = shown_ids.get(line)
        if rec is None:
            bad.append(line)
        elif PROTECTED_TAG in rec.tags:
            logger.warning("memory cleaner refused to delete autobiography record %s", line)
        elif line not in chosen:
            chosen.append(line)
    return chosen, bad


async def clean_memories(ctx: StepContext, cap: int | None) -> list[str]:
    if cap is not None and ctx.memory.count() <= cap:
        return []
    if not ctx.memories:
        return []
    system = ctx.spec.system_prompt
    reply = await ctx.ask(render(prompts.TEMPLATES["memory_cleaner"], memories=fmt_memories(ctx.memories, with_ids=True)), system)
    ids, bad = parse_cleaner_response(reply, ctx.memories)
    for line in bad:
        logger.warning("memory cleaner ignored nonconforming line %r", line[:60])
    # re-check tags at delete time: a shown record may have been replaced meanwhile
    safe = [i for i in ids if (r := ctx.memory.get(i)) is not None and PROTECTED_TAG not in r.tags]
    ctx.memory.delete(safe)
    return safe


def memory_cleaner(params: Mapping[str, Any]):
    cap = params.get("cap", 100)

    async def step(ctx: StepContext):
        deleted = await clean_memories(ctx, cap)
        if not deleted:
            return None
        return Output("deleted " + ",".join(deleted), store=False, meta={"deleted": deleted})

    return step


def memory_manager(params: Mapping[str, Any]):
    """Plantbot's combined pruner and summarizer."""
    cap = params.get("cap", 100)

    async def step(ctx: StepContext):
        deleted = await clean_memories(ctx, cap)
        if not deleted:
            return None
        remaining = [r for r in ctx.memories if r.id not in deleted][:10]
        if not remaining:
            return Output("deleted " + ",".join(deleted), store=False, meta={"deleted": deleted})
        text = await ctx.ask(render(prompts.TEMPLATES["summarizer"], memories=fmt_memories(remaining)), prompts.SUMMARIZER)
        return Output(text, tags=("summary",), meta={"deleted": deleted})

    return step


def ring_successor(ring: Sequence[str], after: str, active: set[str]) -> str | None:
    """Next member of ``ring`` after ``after`` that is in ``active`` (cyclic)."""
    if after not in ring:
        return next((m for m in ring if m in active), None)
    i = ring.index(after)
    for step in range(1, len(ring) + 1):
        cand = ring[(i + step) % len(ring)]
        if cand in active:
            return cand
    return None


def magi(params: Mapping[str, Any]):
    """One voice of the inner dialogue.

    The turn passes around ``ring`` by bus message. A magi answers a message
    only if its sender is still the latest speaker; with an empty inbox it
    speaks only to restart a stalled conversation, and only when it is the
    next active member after the latest speaker.
    """
    ring: list[str] = list(params["ring"])
    stall = float(params.get("stall_s", 20.0))

    async def step(ctx: StepContext):
        rt = ctx.runtime
        me = ctx.name
        members = [rt.handles[m] for m in ring if m in rt.handles]
        active = {h.name for h in members if h.state is ModuleState.ACTIVE}
        spoken = [h for h in members if h.last_output_seq]
        last = max(spoken, key=lambda h: h.last_output_seq) if spoken else None

        turns = [e for e in ctx.inbox if e.from_module in ring]
        if turns:
            msg = turns[-1]
            if last is not None and last.name != msg.from_module:
                return None  # stale turn, someone restarted the round
            peer_text = msg.body
        else:
            if last is None:
                if ring_successor(ring, "", active) != me:
                    return None
            else:
                idle = (rt.now_ms() - (last.last_output_at or 0)) / 1000.0
                if idle < stall or ring_successor(ring, last.name, active) != me:
                    return None
            peer_text = next((v for v in ctx.peers.values() if v), None) or "(silence)"
        text = await ctx.ask(
            render(prompts.TEMPLATES["magi"], memories=fmt_memories(ctx.memories), peer_outputs=peer_text)
        )
        nxt = ring_successor(ring, me, active - {me})
        return Output(text, send_to=(nxt,) if nxt else ())

    return step


def scene_module(params: Mapping[str, Any]):
    template = params.get("template", prompts.TEMPLATES["scene"])

    async def step(ctx: StepContext):
        scene = _scene(ctx)
        if scene is None:
            return None
        return Output(await ctx.ask(render(template, scene=scene)))

    return step


def autobiographical_memory(params: Mapping[str, Any]):
    async def step(ctx: StepContext):
        prev = current_autobiography(ctx.memory)
        text = await ctx.ask(
            render(
                prompts.TEMPLATES["autobiography"],
                previous=prev.text if prev else "(none)",
                memories=fmt_memories(ctx.memories),
            )
        )
        return Output(text)

    return step


@dataclass
class MetaReport:
    generated_at: int
    module_statuses: dict[str, dict]
    resource_sample: dict[str, float | int]
    narrative: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


def sample_resources(memory: MemoryStore) -> dict[str, float | int]:
    import psutil

    proc = psutil.Process()
    return {
        "cpu_percent": float(psutil.cpu_percent(interval=None)),
        "process_memory_bytes": int(proc.memory_info().rss),
        "live_record_count": memory.count(),
    }


def _status_lines(statuses: Mapping[str, dict]) -> str:
    lines = []
    for name, st in statuses.items():
        line = f"{name}: {st['state']} restarts={st['restarts']}"
        if st.get("last_error"):
            line += f" last_error={st['last_error']}"
        lines.append(line)
    return "\n".join(lines)


def meta_system_report(params: Mapping[str, Any]):
    sampler = params.get("resource_sampler", sample_resources)

    async def step(ctx: StepContext):
        statuses = {
            name: {"state": st.state.value, "restarts": st.restarts, "last_error": st.last_error}
            for name, st in ctx.runtime.status_all().items()
        }
        resources = sampler(ctx.memory)
        scene = _scene(ctx) or "(no scene)"
        user = render(
            prompts.TEMPLATES["meta_report"],
            statuses=_status_lines(statuses),
            resources=", ".join(f"{k}={v}" for k, v in resources.items()),
            scene=scene,
            memories=fmt_memories(ctx.memories),
        )
        narrative = (await ctx.ask(user)).strip()
        if not narrative:
            narrative = "Status only: " + _status_lines(statuses).replace("\n", "; ")
        report = MetaReport(ctx.runtime.now_ms(), statuses, resources, narrative)
        ctx.state["last_report"] = report
        ctx.state["last_request"] = user
        return Output(
            narrative,
            headers={"type": "meta_report", "generated_at": str(report.generated_at)},
            meta={"report": {"module_statuses": statuses, "resource_sample": resources}},
        )

    return step


def prompt_modifier(params: Mapping[str, Any]):
    targets: list[str] = list(params.get("targets", ()))
    only_when_idle = bool(params.get("only_when_idle", False))

    async def step(ctx: StepContext):
        reports = [e.body for e in ctx.inbox if e.headers.get("type") == "meta_report"]
        if reports:
            ctx.state["meta_report"] = reports[-1]
        report = ctx.state.get("meta_report")
        if report is None:
            latest = ctx.memory.tagged("meta_report", 1)
            report = latest[0].text if latest else None
        if report is None:
            return None
        if only_when_idle and ctx.runtime.mode != "self_improvement":
            return None
        applied: list[PromptRevision] = []
        for target in targets:
            handle = ctx.runtime.handles.get(target)
            if handle is None:
                continue
            current = handle.spec.system_prompt
            proposal = (
                await ctx.ask(
                    render(prompts.TEMPLATES["prompt_modifier"], meta_report=report, target=target, current=current)
                )
            ).strip()
            if not proposal or proposal == current:
                continue
            rev = ctx.runtime.update_prompt(target, proposal, reason=f"meta report: {report[:80]}")
            if rev is not None:
                applied.append(rev)
        ctx.state["applied"] = applied
        if not applied:
            return None
        return Output(
            "revised " + ",".join(r.module_name for r in applied),
            store=False,
            meta={"revised": [r.module_name for r in applied]},
        )

    return step


def conversation(params: Mapping[str, Any]):
    k = int(params.get("k", 5))

    async def step(ctx: StepContext):
        utterances = [e.body for e in ctx.inbox if e.body.strip()]
        if not utterances:
            return None
        auto = current_autobiography(ctx.memory)
        outs = []
        for i, utt in enumerate(utterances):
            hits = ctx.queried if i == len(utterances) - 1 else ctx.memory.query(utt, k)
            reply = await ctx.ask(
                render(
                    prompts.TEMPLATES["conversation"],
                    autobiography=auto.text if auto else "(none)",
                    memories=fmt_memories(h.record for h in hits),
                    inbox=utt,
                )
            )
            ctx.memory.store(f"Visitor said: {utt}", ctx.name, ("utterance",))
            outs.append(Output(reply))
        return outs

    return step


def interpreter(params: Mapping[str, Any]):
    channel = params["channel"]
    kind = params.get("kind", channel)

    async def step(ctx: StepContext):
        sample = ctx.fresh_sensors.get(channel)
        if sample is None:
            return None
        return Output(await ctx.ask(render(prompts.TEMPLATES["interpreter"], kind=kind, scene=sample.text)))

    return step


def parse_act(text: str) -> bool | None:
    word = text.strip().lower()
    return {"act": True, "wait": False}.get(word)


def action(params: Mapping[str, Any]):
    async def step(ctx: StepContext):
        context = fmt_memories(h.record for h in ctx.queried)
        decision = await ctx.ask(render(prompts.TEMPLATES["action_decide"], memories=context), prompts.ACTION_DECIDE)
        act = parse_act(decision)
        if act is None:
            logger.warning("action: nonconforming decision %r; waiting", decision[:60])
        if not act:
            return None
        instruction = await ctx.ask(render(prompts.TEMPLATES["action_instruct"], memories=context), prompts.ACTION_INSTRUCT)
        return Output(instruction)

    return step


def thinking(params: Mapping[str, Any]):
    async def step(ctx: StepContext):
        return Output(await ctx.ask(render(prompts.TEMPLATES["thinking"], memories=fmt_memories(ctx.memories))))

    return step


# -------------------------------------------------------------- meta layer --
def activation_controller(params: Mapping[str, Any]):
    async def step(ctx: StepContext):
        rt = ctx.runtime
        decisions: dict[str, str] = {}
        for handle in rt.controlled():
            if handle.name == ctx.name or handle.state not in (ModuleState.ACTIVE, ModuleState.DEACTIVATED):
                continue
            decision = await activation_decide(handle.spec, ctx.memories, rt.gateway, model_id=ctx.spec.model_id)
            ctx.gateway_calls += 1
            rt.set_activation(handle, decision)
            decisions[handle.name] = decision.value
        if not decisions:
            return None
        text = ", ".join(f"{k}={v}" for k, v in decisions.items())
        return Output(text, store=False, meta={"decisions": decisions})

    return step


# ---------------------------------------------------------- hardware layer --
def sensor_proxy(params: Mapping[str, Any]):
    """Forward each new sample from a device channel (outputs do the routing)."""
    device = params["device"]

    async def step(ctx: StepContext):
        sample = ctx.fresh_sensors.get(device)
        if sample is None:
            return None
        return Output(sample.text, store=False)

    return step


def speaker(params: Mapping[str, Any]):
    channel = params.get("channel", "speech_out")

    async def step(ctx: StepContext):
        sample = ctx.fresh_sensors.get(channel)
        if sample is None:
            return None
        return Output(f"(says) {sample.text}", store=False)

    return step


def motor_control(params: Mapping[str, Any]):
    channel = params.get("channel", "motor")

    async def step(ctx: StepContext):
        sample = ctx.fresh_sensors.get(channel)
        if sample is None:
            return None
        return Output(await ctx.ask(render(prompts.TEMPLATES["motor"], scene=sample.text)), store=False)

    return step


def custom(params: Mapping[str, Any]):
    """Generic prompt module for agent definitions that bring their own prompt."""

    async def step(ctx: StepContext):
        peers = "\n".join(f"{k}: {v}" for k, v in ctx.peers.items() if v)
        mems = list(ctx.memories) + [h.record for h in ctx.queried]
        user = render(
            params.get("template", prompts.TEMPLATES["memories"]),
            memories=fmt_memories(mems),
            inbox="\n".join(e.body for e in ctx.inbox) or "(none)",
            scene="\n".join(s.text for s in ctx.sensors.values() if s) or "(none)",
            peer_outputs=peers or "(none)",
        )
        return Output(await ctx.ask(user))

    return step


BEHAVIORS = {
    "summarizer": summarizer,
    "memory_cleaner": memory_cleaner,
    "memory_manager": memory_manager,
    "magi": magi,
    "scene": scene_module,
    "autobiographical_memory": autobiographical_memory,
    "meta_system_report": meta_system_report,
    "prompt_modifier": prompt_modifier,
    "conversation": conversation,
    "interpreter": interpreter,
    "action": action,
    "thinking": thinking,
    "activation_controller": activation_controller,
    "sensor_proxy": sensor_proxy,
    "speaker": speaker,
    "motor_control": motor_control,
    "custom": custom,
}
