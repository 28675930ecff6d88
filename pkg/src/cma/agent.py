"""Agent definitions (JSON) and assembly of a runnable agent."""

from __future__ import annotations

import asyncio
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from .bus import Bus, check_name
from .clock import Clock
from .errors import CMAError, ConfigError, InvalidNameError
from .gateway import Backend, Gateway, RetryPolicy, build_backend
from .memory import DEFAULT_DIM, DEFAULT_MAX_RECORDS, MemoryStore
from .runtime import (
    Both,
    InboxMessages,
    OnMessage,
    PeerOutput,
    QueryMemories,
    RecentMemories,
    Runtime,
    SendTo,
    SensorChannel,
    SensorHub,
    StoreMemory,
    Tick,
    Trigger,
)
from .stdlib import CATALOG, BuiltModule, build_module
from .timeline import ModuleLog, Timeline

logger = logging.getLogger(__name__)

OPERATOR = "operator"
BUS_TYPES = ("in_process", "mqtt")
BACKENDS = ("echo", "scripted", "http")


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" | "warning"
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.message}"


@dataclass
class AgentDefinition:
    agent_id: str
    modules: list[dict]
    gateway: dict = field(default_factory=lambda: {"backend": "echo"})
    memory: dict = field(default_factory=dict)
    bus: dict = field(default_factory=lambda: {"type": "in_process"})
    logging: dict = field(default_factory=dict)
    conversation_module: str | None = None
    seed: int = 0
    base_dir: Path = field(default_factory=Path.cwd)
    source: Path | None = None

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any], base_dir: str | Path | None = None) -> "AgentDefinition":
        if not isinstance(obj, Mapping):
            raise ConfigError("agent definition must be a JSON object", [Diagnostic("error", "top level is not an object")])
        return cls(
            agent_id=obj.get("agent_id", ""),
            modules=list(obj.get("modules") or []),
            gateway=dict(obj.get("gateway") or {"backend": "echo"}),
            memory=dict(obj.get("memory") or {}),
            bus=dict(obj.get("bus") or {"type": "in_process"}),
            logging=dict(obj.get("logging") or {}),
            conversation_module=obj.get("conversation_module"),
            seed=int(obj.get("seed", 0)),
            base_dir=Path(base_dir) if base_dir is not None else Path.cwd(),
        )

    @classmethod
    def load(cls, path: str | Path) -> "AgentDefinition":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}", [Diagnostic("error", str(exc))]) from None
        except json.JSONDecodeError as exc:
            msg = f"{path}:{exc.lineno}: invalid JSON: {exc.msg}"
            raise ConfigError(msg, [Diagnostic("error", msg)]) from None
        defn = cls.from_dict(obj, path.parent)
        defn.source = path
        return defn

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def module_names(self) -> list[str]:
        return [m.get("name") or m.get("catalog", "") for m in self.modules]


# -- module entries ------------------------------------------------------------
def _parse_trigger(raw: Any) -> Trigger:
    if isinstance(raw, str):
        raw = {raw: None}
    if not isinstance(raw, Mapping) or len(raw) != 1:
        raise ValueError(f"bad trigger {raw!r}")
    (kind, value), = raw.items()
    if kind == "tick":
        return Tick(float(value))
    if kind == "both":
        return Both(float(value))
    if kind in ("message", "on_message"):
        return OnMessage()
    raise ValueError(f"unknown trigger {kind!r}")


def _parse_input(raw: Mapping[str, Any]):
    if "recent" in raw:
        return RecentMemories(int(raw["recent"]))
    if "query" in raw:
        return QueryMemories(str(raw["query"]), int(raw.get("k", 5)))
    if "inbox" in raw:
        return InboxMessages()
    if "sensor" in raw:
        return SensorChannel(str(raw["sensor"]))
    if "peer" in raw:
        return PeerOutput(str(raw["peer"]))
    raise ValueError(f"unknown input {dict(raw)!r}")


def _parse_output(raw: Mapping[str, Any]):
    if "store" in raw:
        tags = raw["store"]
        return StoreMemory(tuple([tags] if isinstance(tags, str) else tags or ()))
    if "send_to" in raw:
        return SendTo(str(raw["send_to"]))
    if "sensor" in raw:
        return SensorChannel(str(raw["sensor"]))
    raise ValueError(f"unknown output {dict(raw)!r}")


def build_entry(entry: Mapping[str, Any]) -> BuiltModule:
    """Turn one ``modules[]`` item into a spec and behavior."""
    key = entry.get("catalog") or ("custom" if "prompt" in entry else entry.get("name"))
    name = entry.get("name") or key
    kw: dict[str, Any] = {}
    if "interval" in entry:
        kw["interval"] = float(entry["interval"])
    if "activation" in entry:
        kw["activation"] = entry["activation"]
    if "initially_active" in entry:
        kw["initially_active"] = bool(entry["initially_active"])
    if "model_id" in entry:
        kw["model_id"] = str(entry["model_id"])
    if "prompt" in entry:
        kw["prompt"] = str(entry["prompt"])
    if "params" in entry:
        kw["params"] = dict(entry["params"])
    if "trigger" in entry:
        kw["trigger"] = _parse_trigger(entry["trigger"])
    if "inputs" in entry:
        kw["inputs"] = tuple(_parse_input(i) for i in entry["inputs"])
    if "outputs" in entry:
        kw["outputs"] = tuple(_parse_output(o) for o in entry["outputs"])
    if "layer" in entry:
        kw["layer"] = str(entry["layer"])
    return build_module(key, name, **kw)


# -- validation ----------------------------------------------------------------
def validate(defn: AgentDefinition) -> list[Diagnostic]:
    """Check a definition without touching the network or creating files."""
    diags: list[Diagnostic] = []
    err = lambda msg: diags.append(Diagnostic("error", msg))  # noqa: E731
    warn = lambda msg: diags.append(Diagnostic("warning", msg))  # noqa: E731

    try:
        check_name(defn.agent_id, "agent_id")
    except InvalidNameError as exc:
        err(str(exc))
    if not defn.modules:
        err("no modules defined")

    seen: set[str] = set()
    built: dict[str, BuiltModule] = {}
    for i, entry in enumerate(defn.modules):
        if not isinstance(entry, Mapping):
            err(f"modules[{i}] is not an object")
            continue
        name = entry.get("name") or entry.get("catalog")
        if not name:
            err(f"modules[{i}] has neither name nor catalog")
            continue
        if name in seen:
            err(f"duplicate module name {name!r}")
            continue
        seen.add(name)
        if name == OPERATOR:
            err(f"module name {OPERATOR!r} is reserved for the operator channel")
            continue
        key = entry.get("catalog") or ("custom" if "prompt" in entry else name)
        if key not in CATALOG:
            err(f"module {name!r}: unknown catalog entry {key!r}")
            continue
        try:
            built[name] = build_entry(entry)
        except (ValueError, TypeError, KeyError, CMAError) as exc:
            err(f"module {name!r}: {exc}")

    has_controller = any(b.entry.behavior == "activation_controller" for b in built.values())
    for name, b in built.items():
        if b.spec.controlled and not has_controller:
            warn(f"module {name!r} is Controlled but no activation controller is present")
        for out in b.spec.outputs:
            if isinstance(out, SendTo) and out.module_name not in seen:
                warn(f"module {name!r} sends to unknown module {out.module_name!r}")
        forward = b.spec.params.get("forward_to")
        if forward and forward not in seen:
            warn(f"module {name!r} forwards to unknown module {forward!r}")

    if defn.conversation_module and defn.conversation_module not in seen:
        err(f"conversation_module {defn.conversation_module!r} is not defined")

    gw = defn.gateway
    backend = gw.get("backend", "scripted")
    if backend not in BACKENDS:
        err(f"gateway: unknown backend {backend!r}")
    elif backend == "scripted" and gw.get("rules") and not defn.resolve(gw["rules"]).is_file():
        err(f"gateway: rules file {gw['rules']!r} not found")
    elif backend == "http" and not gw.get("url"):
        err("gateway: http backend needs 'url'")

    bus = defn.bus
    if bus.get("type", "in_process") not in BUS_TYPES:
        err(f"bus: unknown type {bus.get('type')!r}")
    elif bus.get("type") == "mqtt" and not bus.get("broker"):
        err("bus: mqtt needs 'broker' (host:port)")

    mem = defn.memory
    for key in ("dim", "max_records"):
        if key in mem and (not isinstance(mem[key], int) or mem[key] <= 0):
            err(f"memory: {key} must be a positive integer")
    return diags


def load_definition(path: str | Path) -> AgentDefinition:
    """Load and validate; raises :class:`ConfigError` on any error diagnostic."""
    defn = AgentDefinition.load(path)
    diags = validate(defn)
    errors = [d for d in diags if d.level == "error"]
    if errors:
        raise ConfigError("; ".join(d.message for d in errors), diags)
    for d in diags:
        logger.warning("%s", d.message)
    return defn


# -- assembly --------------------------------------------------------------------
class Agent:
    """A bus, memory store, gateway and runtime wired from one definition."""

    def __init__(
        self,
        defn: AgentDefinition,
        *,
        clock: Clock,
        backend: Backend | None = None,
        logdir: str | Path | None = None,
        memory_path: str | Path | None = None,
        behavior_wrappers: Mapping[str, Callable] | None = None,
        memory: MemoryStore | None = None,
        fresh_logs: bool = False,
    ) -> None:
        self.defn = defn
        self.clock = clock
        seed = defn.seed
        self.bus = Bus(
            defn.agent_id,
            queue_size=int(defn.bus.get("queue_size", 1024)),
            now_ms=clock.now_ms,
            rng=random.Random(seed),
        )
        mpath = memory_path if memory_path is not None else defn.memory.get("path")
        if mpath is not None and memory is None:
            mpath = defn.resolve(mpath)
        self.memory = memory or MemoryStore(
            mpath,
            dim=int(defn.memory.get("dim", DEFAULT_DIM)),
            max_records=int(defn.memory.get("max_records", DEFAULT_MAX_RECORDS)),
            now_ms=clock.now_ms,
        )
        gw = defn.gateway
        self.gateway = Gateway(
            backend or build_backend(gw, defn.base_dir),
            retry=RetryPolicy(**gw["retry"]) if "retry" in gw else None,
            max_concurrency=int(gw.get("max_concurrency", 8)),
            rng=random.Random(seed + 1),
            clock=clock,
        )
        logdir = logdir if logdir is not None else defn.logging.get("dir")
        self.logdir = Path(logdir) if logdir is not None else None
        self.timeline = Timeline()
        self.sensors = SensorHub(clock.now_ms)
        self.runtime = Runtime(
            bus=self.bus,
            memory=self.memory,
            gateway=self.gateway,
            clock=clock,
            sensors=self.sensors,
            timeline=self.timeline,
            log=ModuleLog(self.logdir, fresh=fresh_logs),
        )
        self.built: dict[str, BuiltModule] = {}
        wrappers = behavior_wrappers or {}
        for entry in defn.modules:
            b = build_entry(entry)
            behavior = b.behavior
            if b.spec.name in wrappers:
                behavior = wrappers[b.spec.name](behavior)
            self.built[b.spec.name] = b
            self.runtime.spawn(b.spec, behavior)
        self.operator = self.bus.subscribe(OPERATOR)
        self.adapter = None
        self.replies: asyncio.Queue[str] | None = None
        self._operator_task: asyncio.Task | None = None
        self.last_utterance_at: float | None = None

    @property
    def conversation_module(self) -> str | None:
        if self.defn.conversation_module:
            return self.defn.conversation_module
        for name, b in self.built.items():
            if b.entry.behavior == "conversation":
                return name
        return None

    async def start(self) -> None:
        self.clock.bind()
        self.bus.start()
        self.replies = asyncio.Queue()
        self.sensors.listen("speech_out", lambda s: self.replies.put_nowait(s.text))  # type: ignore[union-attr]
        if self.defn.bus.get("type") == "mqtt":
            from .mqtt_adapter import external_adapter_connect

            self.adapter = await asyncio.to_thread(
                external_adapter_connect, self.bus, self.defn.bus["broker"], self.defn.agent_id
            )
            # deliver inbound envelopes on this loop rather than paho's thread
            self.adapter._loop = asyncio.get_running_loop()
        await self.runtime.start()
        self._operator_task = asyncio.create_task(self._serve_operator(), name="operator")

    async def stop(self) -> None:
        if self._operator_task is not None:
            self._operator_task.cancel()
            await asyncio.gather(self._operator_task, return_exceptions=True)
        await self.runtime.stop()
        if self.adapter is not None:
            self.adapter.close()
        self.bus.stop()
        self.memory.close()

    # operator channel ------------------------------------------------------------
    def sensor_write(self, channel: str, text: str) -> None:
        self.sensors.write(channel, text, source=OPERATOR)

    def utterance(self, text: str) -> bool:
        target = self.conversation_module
        if target is None:
            logger.warning("no conversation module; utterance dropped")
            return False
        self.last_utterance_at = self.clock.now()
        self.bus.send(OPERATOR, target, text)
        return True

    def handle_command(self, body: str) -> None:
        try:
            cmd = json.loads(body)
            kind = cmd["cmd"]
        except (ValueError, KeyError, TypeError):
            logger.warning("operator: unreadable command %r", body[:80])
            return
        if kind == "sensor_write":
            self.sensor_write(str(cmd["channel"]), str(cmd["text"]))
        elif kind == "utterance":
            self.utterance(str(cmd["text"]))
        else:
            logger.warning("operator: unknown command %r", kind)

    async def _serve_operator(self) -> None:
        while True:
            await self.operator.wait_nonempty()
            for env in self.operator.drain(64):
                self.handle_command(env.body)


def operator_command(cmd: str, **fields: Any) -> str:
    return json.dumps({"cmd": cmd, **fields}, separators=(",", ":"), sort_keys=True)
