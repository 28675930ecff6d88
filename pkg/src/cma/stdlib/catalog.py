"""Catalog of built-in modules for the Plantbot and ALTER3 agents.

Each entry knows its role sentence, default layer, trigger, declared inputs
and outputs, and which behavior factory drives it. :func:`build_module` turns
an entry plus per-agent overrides into a ready ``(ModuleSpec, behavior)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from ..runtime import (
    ActivationPolicy,
    Behavior,
    Both,
    InboxMessages,
    ModuleSpec,
    OnMessage,
    PeerOutput,
    QueryMemories,
    RecentMemories,
    SendTo,
    SensorChannel,
    StoreMemory,
    Tick,
    Trigger,
)
from . import prompts
from .modules import BEHAVIORS, template_fields

LAYERS = ("hardware-proxy", "base", "meta")
MAGI_RING = ("magi_a", "magi_b", "magi_c")

IO = tuple[tuple, tuple]


@dataclass(frozen=True)
class BuiltinCatalogEntry:
    key: str
    role: str
    system_body: str
    prompt_template: str
    default_layer: str
    behavior: str
    interval: float
    io: Callable[[str, Mapping[str, Any]], IO]
    trigger_kind: str = "tick"  # tick | both | message
    activation: ActivationPolicy = ActivationPolicy.ALWAYS_ON
    params: Mapping[str, Any] = field(default_factory=dict)

    def prefix(self, name: str) -> str:
        return f"You are the {name} module. {self.role}\n\n"

    def spec(self, name: str | None = None, **overrides: Any) -> ModuleSpec:
        return build_module(self.key, name, **overrides).spec


@dataclass(frozen=True)
class BuiltModule:
    entry: BuiltinCatalogEntry
    spec: ModuleSpec
    behavior: Behavior


def _make_trigger(kind: str, interval: float) -> Trigger:
    if kind == "tick":
        return Tick(interval)
    if kind == "both":
        return Both(interval)
    if kind == "message":
        return OnMessage()
    raise ValueError(f"unknown trigger kind {kind!r}")


def _io(*inputs, outputs=()) -> Callable[[str, Mapping[str, Any]], IO]:
    return lambda name, params: (tuple(inputs), tuple(outputs))


def _magi_io(name: str, params: Mapping[str, Any]) -> IO:
    ring = list(params.get("ring", MAGI_RING))
    prev = ring[(ring.index(name) - 1) % len(ring)] if name in ring else ring[-1]
    return (RecentMemories(1), PeerOutput(prev), InboxMessages()), (StoreMemory((f"magi_{name.rsplit('_', 1)[-1]}",)),)


def _proxy_io(name: str, params: Mapping[str, Any]) -> IO:
    outs: list = [SensorChannel(params["publish"])]
    if params.get("forward_to"):
        outs.append(SendTo(params["forward_to"]))
    return (SensorChannel(params["device"]),), tuple(outs)


def _meta_report_io(name: str, params: Mapping[str, Any]) -> IO:
    outs: list = [StoreMemory(("meta_report",))]
    outs.extend(SendTo(t) for t in params.get("report_to", ("prompt_modifier",)))
    return (RecentMemories(30), SensorChannel("vision")), tuple(outs)


def _interp_io(name: str, params: Mapping[str, Any]) -> IO:
    return (SensorChannel(params["channel"]),), (StoreMemory((params["kind"],)),)


def _scene_entry(key: str, role: str, body: str) -> BuiltinCatalogEntry:
    return BuiltinCatalogEntry(
        key, role, body, prompts.TEMPLATES["scene"], "base", "scene", 10.0,
        _io(SensorChannel("vision"), outputs=(StoreMemory((key,)),)),
        activation=ActivationPolicy.CONTROLLED,
    )


CONTROLLED = ActivationPolicy.CONTROLLED

_ENTRIES = [
    # ALTER3 base system
    BuiltinCatalogEntry(
        "conversation", "It talks with visitors.", prompts.CONVERSATION, prompts.TEMPLATES["conversation"], "base",
        "conversation", 5.0,
        _io(InboxMessages(), QueryMemories("{inbox}", 5), outputs=(SensorChannel("speech_out"), StoreMemory(("conversation",)))),
        trigger_kind="both",
    ),
    BuiltinCatalogEntry(
        "summarizer", "It condenses the latest memories into a summary.", prompts.SUMMARIZER,
        prompts.TEMPLATES["summarizer"], "base", "summarizer", 15.0,
        _io(RecentMemories(10), outputs=(StoreMemory(("summary",)),)), activation=CONTROLLED,
    ),
    *[
        BuiltinCatalogEntry(
            f"magi_{x}", f"It is inner voice {x.upper()} of the robot.",
            f"{prompts.MAGI_COMMON} {prompts.MAGI_PERSONALITIES[x]}", prompts.TEMPLATES["magi"], "base", "magi", 8.0,
            _magi_io, activation=CONTROLLED, params={"ring": MAGI_RING, "stall_s": 20.0},
        )
        for x in "abc"
    ],
    _scene_entry("image_description", "It describes what the eye camera sees.", prompts.IMAGE_DESCRIPTION),
    _scene_entry("task_planning", "It plans the next task from the scene.", prompts.TASK_PLANNING),
    _scene_entry("desire", "It says what the robot wants to do in the scene.", prompts.DESIRE),
    _scene_entry("prediction", "It forecasts what happens next in the scene.", prompts.PREDICTION),
    _scene_entry("reaction_analyzer", "It reads how people react to the robot.", prompts.REACTION_ANALYZER),
    BuiltinCatalogEntry(
        "memory_cleaner", "It deletes unneeded memories to keep the database small.", prompts.MEMORY_CLEANER,
        prompts.TEMPLATES["memory_cleaner"], "base", "memory_cleaner", 10.0,
        _io(RecentMemories(20)), activation=CONTROLLED, params={"cap": 100},
    ),
    # ALTER3 meta system
    BuiltinCatalogEntry(
        "meta_system_report", "It monitors every module and the workspace.", prompts.META_SYSTEM_REPORT,
        prompts.TEMPLATES["meta_report"], "meta", "meta_system_report", 20.0, _meta_report_io,
        params={"report_to": ("prompt_modifier",)},
    ),
    BuiltinCatalogEntry(
        "autobiographical_memory", "It keeps the robot's life story up to date.", prompts.AUTOBIOGRAPHY,
        prompts.TEMPLATES["autobiography"], "meta", "autobiographical_memory", 30.0,
        _io(RecentMemories(20), outputs=(StoreMemory(("autobiography",)),)),
    ),
    BuiltinCatalogEntry(
        "prompt_modifier", "It rewrites other modules' system prompts from meta reports.", prompts.PROMPT_MODIFIER,
        prompts.TEMPLATES["prompt_modifier"], "meta", "prompt_modifier", 30.0, _io(InboxMessages()),
        params={"targets": ("conversation", "desire"), "only_when_idle": False},
    ),
    BuiltinCatalogEntry(
        "activation_controller", "It switches controlled modules on and off.", "Decide module activation.",
        prompts.TEMPLATES["activation"], "meta", "activation_controller", 20.0, _io(RecentMemories(20)),
    ),
    # hardware proxies
    BuiltinCatalogEntry(
        "camera", "It captures camera frames.", "Forward camera frames.", prompts.TEMPLATES["proxy"],
        "hardware-proxy", "sensor_proxy", 0.5, _proxy_io, params={"device": "camera", "publish": "camera_frame"},
    ),
    BuiltinCatalogEntry(
        "image_processing", "It turns camera frames into the current scene.", "Process frames into scenes.",
        prompts.TEMPLATES["proxy"], "hardware-proxy", "sensor_proxy", 0.5, _proxy_io,
        params={"device": "camera_frame", "publish": "vision"},
    ),
    BuiltinCatalogEntry(
        "microphone", "It captures speech.", "Forward recognised speech.", prompts.TEMPLATES["proxy"],
        "hardware-proxy", "sensor_proxy", 0.5, _proxy_io,
        params={"device": "microphone", "publish": "audio", "forward_to": "conversation"},
    ),
    BuiltinCatalogEntry(
        "soil_sensor", "It reads the soil probe.", "Forward soil readings.", prompts.TEMPLATES["proxy"],
        "hardware-proxy", "sensor_proxy", 0.5, _proxy_io, params={"device": "soil_probe", "publish": "soil"},
    ),
    BuiltinCatalogEntry(
        "speaker", "It speaks replies aloud.", "Speak.", prompts.TEMPLATES["proxy"], "hardware-proxy", "speaker", 0.5,
        _io(SensorChannel("speech_out")),
    ),
    BuiltinCatalogEntry(
        "motor_control", "It drives the motors.", prompts.MOTOR_CONTROL, prompts.TEMPLATES["motor"], "hardware-proxy",
        "motor_control", 0.5, _io(SensorChannel("motor"), outputs=(SensorChannel("motor_command"),)),
    ),
    # Plantbot base system
    BuiltinCatalogEntry(
        "vision_interpreter", "It describes what the plant's camera sees.", prompts.VISION_INTERPRETER,
        prompts.TEMPLATES["interpreter"], "base", "interpreter", 2.0, _interp_io,
        params={"channel": "camera_frame", "kind": "vision"},
    ),
    BuiltinCatalogEntry(
        "audio_interpreter", "It describes what the plant hears.", prompts.AUDIO_INTERPRETER,
        prompts.TEMPLATES["interpreter"], "base", "interpreter", 2.0, _interp_io,
        params={"channel": "audio", "kind": "audio"},
    ),
    BuiltinCatalogEntry(
        "soil_interpreter", "It expresses how the soil feels.", prompts.SOIL_INTERPRETER,
        prompts.TEMPLATES["interpreter"], "base", "interpreter", 2.0, _interp_io,
        params={"channel": "soil", "kind": "soil"},
    ),
    BuiltinCatalogEntry(
        "action", "It decides whether and how the robot base moves.", prompts.ACTION_DECIDE,
        prompts.TEMPLATES["action_decide"], "base", "action", 10.0,
        _io(QueryMemories("plant soil water light person movement", 8), outputs=(StoreMemory(("action",)), SensorChannel("motor"))),
    ),
    BuiltinCatalogEntry(
        "chat", "It talks with people on behalf of the plant.", prompts.CHAT, prompts.TEMPLATES["conversation"], "base",
        "conversation", 5.0,
        _io(InboxMessages(), QueryMemories("{inbox}", 5), outputs=(SensorChannel("speech_out"), StoreMemory(("conversation",)))),
        trigger_kind="both",
    ),
    BuiltinCatalogEntry(
        "thinking", "It produces free thoughts and intentions.", prompts.THINKING, prompts.TEMPLATES["thinking"], "base",
        "thinking", 15.0, _io(RecentMemories(10), outputs=(StoreMemory(("thought",)),)),
    ),
    BuiltinCatalogEntry(
        "memory_manager", "It prunes and summarizes the memory store.", prompts.MEMORY_CLEANER,
        prompts.TEMPLATES["memory_cleaner"], "base", "memory_manager", 10.0,
        _io(RecentMemories(20), outputs=(StoreMemory(("memory_manager",)),)), params={"cap": 100},
    ),
    # free-form
    BuiltinCatalogEntry(
        "custom", "It follows its own prompt.", "", prompts.TEMPLATES["memories"], "base", "custom", 10.0,
        _io(RecentMemories(10), outputs=(StoreMemory(("custom",)),)),
    ),
]

CATALOG: dict[str, BuiltinCatalogEntry] = {e.key: e for e in _ENTRIES}

# recent memories each memory-facing module reads per step
RECENT_ARITY = {
    "summarizer": 10,
    "magi_a": 1,
    "magi_b": 1,
    "magi_c": 1,
    "memory_cleaner": 20,
    "autobiographical_memory": 20,
    "meta_system_report": 30,
}

# placeholder -> input kinds that can feed it
PLACEHOLDER_SOURCES = {
    "memories": (RecentMemories, QueryMemories),
    "inbox": (InboxMessages,),
    "scene": (SensorChannel,),
    "peer_outputs": (PeerOutput,),
    "meta_report": (InboxMessages,),
}


def build_module(
    key: str,
    name: str | None = None,
    *,
    interval: float | None = None,
    activation: str | ActivationPolicy | None = None,
    initially_active: bool = True,
    model_id: str = "default",
    prompt: str | None = None,
    params: Mapping[str, Any] | None = None,
    inputs: tuple | None = None,
    outputs: tuple | None = None,
    trigger: Trigger | None = None,
    layer: str | None = None,
) -> BuiltModule:
    try:
        entry = CATALOG[key]
    except KeyError:
        raise KeyError(f"unknown catalog entry {key!r}") from None
    name = name or key
    merged = {**entry.params, **(params or {})}
    default_in, default_out = entry.io(name, merged)
    prefix = entry.prefix(name)
    body = entry.system_body if prompt is None else prompt
    spec = ModuleSpec(
        name=name,
        system_prompt=prefix + body,
        trigger=trigger or _make_trigger(entry.trigger_kind, entry.interval if interval is None else interval),
        inputs=default_in if inputs is None else inputs,
        outputs=default_out if outputs is None else outputs,
        activation_policy=ActivationPolicy(activation) if activation is not None else entry.activation,
        initially_active=initially_active,
        model_id=model_id,
        immutable_prefix=prefix,
        layer=layer or entry.default_layer,
        params=merged,
    )
    return BuiltModule(entry, spec, BEHAVIORS[entry.behavior](merged))


def placeholder_violations(entry: BuiltinCatalogEntry, spec: ModuleSpec) -> list[str]:
    """Template placeholders that no declared input can supply."""
    missing = []
    for placeholder in sorted(template_fields(entry.prompt_template) & set(PLACEHOLDER_SOURCES)):
        kinds = PLACEHOLDER_SOURCES[placeholder]
        fed = any(isinstance(src, kinds) for src in spec.inputs)
        if placeholder == "inbox" and not isinstance(spec.trigger, Tick):
            fed = True
        if not fed:
            missing.append(placeholder)
    return missing
