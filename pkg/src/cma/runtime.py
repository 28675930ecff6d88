"""Supervised, independently scheduled module loops.

Each module is a :class:`ModuleSpec` plus a behavior coroutine. The runtime
gathers the module's declared inputs (recent or queried memories, inbox,
sensor channels, peer outputs), calls the behavior, and applies its declared
outputs (memory stores, bus sends, sensor writes). A behavior that raises
marks only its own module ``Failed``; the supervisor restarts it after a
capped exponential backoff.
"""

from __future__ import annotations

import asyncio
import enum
import inspect
import logging
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Any, Awaitable, Callable, Iterable, Mapping, Sequence, Union

from .bus import Bus, Envelope, Subscription, check_name
from .clock import Clock
from .errors import DuplicateModuleError, GatewayError, UnknownModuleError
from .gateway import ChatRequest, Gateway
from .memory import MemoryRecord, MemoryStore, QueryHit
from .timeline import ModuleLog, Timeline

logger = logging.getLogger(__name__)

INBOX_DRAIN_CAP = 16
MIN_TICK = 0.010


# ---------------------------------------------------------------- triggers --
@dataclass(frozen=True)
class Tick:
    interval: float  # seconds


@dataclass(frozen=True)
class OnMessage:
    pass


@dataclass(frozen=True)
class Both:
    interval: float


Trigger = Union[Tick, OnMessage, Both]


# ---------------------------------------------------------- inputs/outputs --
@dataclass(frozen=True)
class RecentMemories:
    n: int


@dataclass(frozen=True)
class QueryMemories:
    query_template: str
    k: int


@dataclass(frozen=True)
class InboxMessages:
    pass


@dataclass(frozen=True)
class SensorChannel:
    """Usable both as an input (latest sample) and an output (write)."""

    name: str


@dataclass(frozen=True)
class PeerOutput:
    module_name: str


@dataclass(frozen=True)
class StoreMemory:
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class SendTo:
    module_name: str


InputSource = Union[RecentMemories, QueryMemories, InboxMessages, SensorChannel, PeerOutput]
OutputSink = Union[StoreMemory, SendTo, SensorChannel]


class ActivationPolicy(str, enum.Enum):
    ALWAYS_ON = "always_on"
    CONTROLLED = "controlled"


@dataclass(frozen=True)
class SupervisorPolicy:
    restart: bool = True
    base: float = 0.25
    factor: float = 2.0
    cap: float = 10.0
    max_restarts_per_hour: int = 60

    def backoff(self, consecutive_failures: int) -> float:
        n = max(1, consecutive_failures)
        return min(self.cap, self.base * self.factor ** (n - 1))


@dataclass(frozen=True)
class ModuleSpec:
    name: str
    system_prompt: str = ""
    trigger: Trigger = Tick(1.0)
    inputs: tuple[InputSource, ...] = ()
    outputs: tuple[OutputSink, ...] = ()
    activation_policy: ActivationPolicy = ActivationPolicy.ALWAYS_ON
    initially_active: bool = True
    model_id: str = "default"
    immutable_prefix: str = ""
    supervisor: SupervisorPolicy = SupervisorPolicy()
    layer: str = "base"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        check_name(self.name, "module name")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "activation_policy", ActivationPolicy(self.activation_policy))
        if isinstance(self.trigger, (Tick, Both)) and self.trigger.interval < MIN_TICK:
            raise ValueError(f"{self.name}: tick interval must be >= {MIN_TICK * 1000:.0f} ms")
        if not self.system_prompt.startswith(self.immutable_prefix):
            raise ValueError(f"{self.name}: system prompt must start with its immutable prefix")
        for src in self.inputs:
            if isinstance(src, RecentMemories) and src.n < 1:
                raise ValueError(f"{self.name}: RecentMemories needs n >= 1")
            if isinstance(src, QueryMemories) and src.k < 1:
                raise ValueError(f"{self.name}: QueryMemories needs k >= 1")

    def __hash__(self) -> int:
        return hash(self.name)

    @property
    def controlled(self) -> bool:
        return self.activation_policy is ActivationPolicy.CONTROLLED

    @property
    def interval(self) -> float | None:
        return getattr(self.trigger, "interval", None)

    def recent_n(self) -> int | None:
        for src in self.inputs:
            if isinstance(src, RecentMemories):
                return src.n
        return None


# ------------------------------------------------------------------ status --
class ModuleState(str, enum.Enum):
    CREATED = "Created"
    ACTIVE = "Active"
    DEACTIVATED = "Deactivated"
    FAILED = "Failed"
    STOPPED = "Stopped"


S = ModuleState
LEGAL_TRANSITIONS = frozenset(
    {(S.CREATED, S.ACTIVE), (S.ACTIVE, S.DEACTIVATED), (S.DEACTIVATED, S.ACTIVE), (S.ACTIVE, S.FAILED), (S.FAILED, S.ACTIVE)}
    | {(s, S.STOPPED) for s in S if s is not S.STOPPED}
)


@dataclass(frozen=True)
class ModuleStatus:
    state: ModuleState
    restarts: int
    last_output_at: int | None
    last_error: str | None


class ActivationDecision(enum.Enum):
    ACTIVATE = "activate"
    DEACTIVATE = "deactivate"
    NO_CHANGE = "none"


@dataclass(frozen=True)
class PromptRevision:
    module_name: str
    old_prompt: str
    new_prompt: str
    reason: str
    applied_at: int


@dataclass(frozen=True)
class RestartAction:
    module: str
    action: str  # "restarted" | "gave_up"
    at: int
    restarts: int


# ----------------------------------------------------------------- sensors --
@dataclass(frozen=True)
class SensorSample:
    channel: str
    text: str
    seq: int
    ts: int
    source: str


class SensorHub:
    """Latest-value channels for hardware I/O (text stands in for signals)."""

    def __init__(self, now_ms: Callable[[], int] | None = None) -> None:
        self._latest: dict[str, SensorSample] = {}
        self._seq = 0
        self._lock = threading.Lock()
        self._listeners: dict[str, list[Callable[[SensorSample], None]]] = defaultdict(list)
        self.now_ms = now_ms or (lambda: 0)
        self.history: list[SensorSample] = []

    def write(self, channel: str, text: str, source: str = "external") -> SensorSample:
        with self._lock:
            self._seq += 1
            sample = SensorSample(channel, text, self._seq, self.now_ms(), source)
            self._latest[channel] = sample
            self.history.append(sample)
            listeners = list(self._listeners.get(channel, ()))
        for cb in listeners:
            try:
                cb(sample)
            except Exception:
                logger.exception("sensor listener on %s failed", channel)
        return sample

    def latest(self, channel: str) -> SensorSample | None:
        with self._lock:
            return self._latest.get(channel)

    def listen(self, channel: str, callback: Callable[[SensorSample], None]) -> None:
        with self._lock:
            self._listeners[channel].append(callback)


# ----------------------------------------------------------- step plumbing --
@dataclass
class Output:
    """One behavior result. Declared outputs of the spec apply to every Output;
    ``tags``/``send_to``/``channels`` add to them for this result only."""

    text: str
    tags: tuple[str, ...] = ()
    send_to: tuple[str, ...] = ()
    channels: tuple[str, ...] = ()
    store: bool = True
    headers: Mapping[str, str] = field(default_factory=dict)
    meta: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class StepContext:
    spec: ModuleSpec
    runtime: "Runtime"
    state: dict
    memories: list[MemoryRecord] = field(default_factory=list)
    queried: list[QueryHit] = field(default_factory=list)
    inbox: list[Envelope] = field(default_factory=list)
    sensors: dict[str, SensorSample | None] = field(default_factory=dict)
    fresh_sensors: dict[str, SensorSample] = field(default_factory=dict)
    peers: dict[str, str | None] = field(default_factory=dict)
    gateway_calls: int = 0

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def memory(self) -> MemoryStore:
        return self.runtime.memory

    @property
    def clock(self) -> Clock:
        return self.runtime.clock

    async def ask(self, user_text: str, system_prompt: str | None = None, **kw: Any) -> str:
        prompt = self.spec.system_prompt if system_prompt is None else system_prompt
        request = ChatRequest.simple(prompt, user_text, model_id=kw.pop("model_id", self.spec.model_id), **kw)
        self.gateway_calls += 1
        response = await self.runtime.gateway.complete(request)
        return response.text


Behavior = Callable[[StepContext], Union[Awaitable[Any], Any]]


@dataclass
class StepReport:
    module: str
    ts: int
    ok: bool
    skipped: bool = False
    outputs: list[Output] = field(default_factory=list)
    inbox: int = 0
    error: str | None = None


class ModuleHandle:
    def __init__(self, spec: ModuleSpec, behavior: Behavior, subscription: Subscription) -> None:
        self.spec = spec
        self.original_prompt = spec.system_prompt
        self.behavior = behavior
        self.subscription = subscription
        self.state = ModuleState.CREATED
        self.restarts = 0
        self.last_output_at: int | None = None
        self.last_output_text: str | None = None
        self.last_error: str | None = None
        self.history: list[tuple[int, ModuleState, ModuleState]] = []
        self.scratch: dict = {}
        self.sensor_cursor: dict[str, int] = {}
        self.failed_at: float | None = None
        self.consecutive_failures = 0
        self.restart_times: deque[float] = deque()
        self.gave_up = False
        self.task: asyncio.Task | None = None
        self.step_lock = asyncio.Lock()
        self.active_event = asyncio.Event()
        self.steps = 0
        self.last_output_seq = 0

    @property
    def name(self) -> str:
        return self.spec.name

    def status(self) -> ModuleStatus:
        return ModuleStatus(self.state, self.restarts, self.last_output_at, self.last_error)

    def __repr__(self) -> str:
        return f"<ModuleHandle {self.name} {self.state.value}>"


def _normalize(result: Any) -> list[Output]:
    if result is None:
        return []
    if isinstance(result, Output):
        return [result]
    if isinstance(result, str):
        return [Output(result)]
    if isinstance(result, (list, tuple)):
        out: list[Output] = []
        for item in result:
            out.extend(_normalize(item))
        return out
    raise TypeError(f"behavior returned unsupported value of type {type(result).__name__}")


class _Defaults(dict):
    def __missing__(self, key: str) -> str:
        return ""


# ----------------------------------------------------------------- runtime --
class Runtime:
    def __init__(
        self,
        *,
        bus: Bus,
        memory: MemoryStore,
        gateway: Gateway,
        clock: Clock | None = None,
        sensors: SensorHub | None = None,
        timeline: Timeline | None = None,
        log: ModuleLog | None = None,
    ) -> None:
        self.bus = bus
        self.memory = memory
        self.gateway = gateway
        self.clock = clock or Clock()
        self.sensors = sensors or SensorHub(self.now_ms)
        self.timeline = timeline if timeline is not None else Timeline()
        self.log = log or ModuleLog(None)
        self.handles: dict[str, ModuleHandle] = {}
        self.alerts: list[str] = []
        self.revisions: list[PromptRevision] = []
        self.mode = "interactive"
        self._output_seq = 0
        self._running = False
        self._supervisor_task: asyncio.Task | None = None
        self._sup_wake: asyncio.Event | None = None

    # time -----------------------------------------------------------------
    def now_ms(self) -> int:
        return self.clock.now_ms()

    @property
    def agent_id(self) -> str:
        return self.bus.agent_id

    # lifecycle --------------------------------------------------------------
    def spawn(self, spec: ModuleSpec, behavior: Behavior) -> ModuleHandle:
        if spec.name in self.handles:
            raise DuplicateModuleError(f"module {spec.name!r} already spawned")
        sub = self.bus.subscribe(spec.name)
        h = ModuleHandle(spec, behavior, sub)
        self.handles[spec.name] = h
        self._transition(h, ModuleState.ACTIVE)
        h.active_event.set()
        if spec.controlled and not spec.initially_active:
            self._transition(h, ModuleState.DEACTIVATED)
            h.active_event.clear()
        if self._running:
            self._start_loop(h)
        return h

    async def start(self) -> None:
        self.clock.bind()
        self._running = True
        self._sup_wake = asyncio.Event()
        for h in self.handles.values():
            if h.task is None and h.state in (ModuleState.ACTIVE, ModuleState.DEACTIVATED):
                self._start_loop(h)
        self._supervisor_task = asyncio.create_task(self._supervise(), name="supervisor")

    async def stop(self) -> None:
        self._running = False
        tasks = [h.task for h in self.handles.values() if h.task is not None]
        if self._supervisor_task is not None:
            tasks.append(self._supervisor_task)
        if self._sup_wake is not None:
            self._sup_wake.set()
        # asyncio.wait_for may swallow a cancel that races a finishing call,
        # so keep cancelling until every task has really ended
        pending = set(tasks)
        while pending:
            for t in pending:
                t.cancel()
            _, pending = await asyncio.wait(pending, timeout=1.0)
        for h in self.handles.values():
            h.task = None
            if h.state is not ModuleState.STOPPED:
                self._transition(h, ModuleState.STOPPED)
            h.active_event.set()
            h.subscription.close()
        self.log.close()

    def _start_loop(self, h: ModuleHandle) -> None:
        h.task = asyncio.create_task(self._loop(h), name=f"module:{h.name}")

    def handle(self, ref: ModuleHandle | str) -> ModuleHandle:
        if isinstance(ref, ModuleHandle):
            return ref
        try:
            return self.handles[ref]
        except KeyError:
            raise UnknownModuleError(ref) from None

    # state machine ------------------------------------------------------------
    def _transition(self, h: ModuleHandle, new: ModuleState) -> None:
        old = h.state
        if old is new:
            return
        if (old, new) not in LEGAL_TRANSITIONS:
            raise RuntimeError(f"illegal transition {old.value} -> {new.value} for {h.name}")
        h.state = new
        h.history.append((self.now_ms(), old, new))

    def _event(self, h: ModuleHandle, kind: str, output_summary: str | None = None, **extra: Any) -> int:
        ts = self.now_ms()
        self.timeline.append(ts, h.name, kind)
        if kind == "step" and output_summary is not None:
            self.timeline.append(ts, h.name, "output")
        if kind != "output":
            self.log.write(ts, h.name, h.state.value, kind, output_summary, **extra)
        return ts

    # loop ---------------------------------------------------------------------
    async def _loop(self, h: ModuleHandle) -> None:
        next_due: float | None = None
        try:
            while self._running:
                if h.state is ModuleState.DEACTIVATED:
                    await h.active_event.wait()
                    next_due = None
                    continue
                if h.state is not ModuleState.ACTIVE:
                    return
                trig = h.spec.trigger
                if isinstance(trig, OnMessage):
                    await h.subscription.wait_nonempty()
                elif isinstance(trig, Tick):
                    if next_due is not None:
                        await self.clock.sleep_until(next_due)
                elif isinstance(trig, Both) and next_due is not None:
                    remaining = next_due - self.clock.now()
                    if remaining > 0 and len(h.subscription) == 0:
                        try:
                            await self.clock.wait_for(h.subscription.wait_nonempty(), remaining)
                        except asyncio.TimeoutError:
                            pass
                if h.state is not ModuleState.ACTIVE or not self._running:
                    continue
                started = self.clock.now()
                report = await self.run_loop_step(h)
                if not report.ok:
                    return
                interval = h.spec.interval
                next_due = None if interval is None else started + interval
        finally:
            if h.task is asyncio.current_task():
                h.task = None

    async def run_loop_step(self, ref: ModuleHandle | str) -> StepReport:
        h = self.handle(ref)
        async with h.step_lock:
            if h.state is not ModuleState.ACTIVE:
                return StepReport(h.name, self.now_ms(), ok=True, skipped=True)
            ctx = None
            try:
                ctx = self._gather(h)
                result = h.behavior(ctx)
                if inspect.isawaitable(result):
                    result = await result
                outputs = _normalize(result)
                for out in outputs:
                    self._apply(h, out)
            except asyncio.CancelledError:
                raise
            except Exception as exc:  # contained: only this module fails
                err = f"{type(exc).__name__}: {exc}"
                self._fail(h, err)
                return StepReport(h.name, self.now_ms(), ok=False, inbox=len(ctx.inbox) if ctx else 0, error=err)
            h.consecutive_failures = 0
            h.steps += 1
            summary = None
            extra: dict[str, Any] = {}
            if outputs:
                self._output_seq += 1
                h.last_output_seq = self._output_seq
                h.last_output_at = self.now_ms()
                h.last_output_text = outputs[-1].text
                summary = _summarize(outputs[-1].text)
                for out in outputs:
                    extra.update(out.meta)
            ts = self._event(h, "step", summary, **extra)
            return StepReport(h.name, ts, ok=True, outputs=outputs, inbox=len(ctx.inbox))

    def _gather(self, h: ModuleHandle) -> StepContext:
        spec = h.spec
        ctx = StepContext(spec=spec, runtime=self, state=h.scratch)
        wants_inbox = not isinstance(spec.trigger, Tick) or any(isinstance(s, InboxMessages) for s in spec.inputs)
        if wants_inbox:
            ctx.inbox = h.subscription.drain(INBOX_DRAIN_CAP)
        for src in spec.inputs:
            if isinstance(src, SensorChannel):
                sample = self.sensors.latest(src.name)
                ctx.sensors[src.name] = sample
                if sample is not None and sample.seq > h.sensor_cursor.get(src.name, 0):
                    ctx.fresh_sensors[src.name] = sample
                    h.sensor_cursor[src.name] = sample.seq
            elif isinstance(src, PeerOutput):
                peer = self.handles.get(src.module_name)
                ctx.peers[src.module_name] = peer.last_output_text if peer else None
        for src in spec.inputs:
            if isinstance(src, RecentMemories):
                ctx.memories = self.memory.recent(src.n)
            elif isinstance(src, QueryMemories):
                scene = self.sensors.latest("vision")
                fields = _Defaults(
                    inbox=ctx.inbox[-1].body if ctx.inbox else "",
                    scene=scene.text if scene else "",
                    prompt=spec.system_prompt,
                )
                text = src.query_template.format_map(fields).strip()
                ctx.queried = self.memory.query(text, src.k) if text else []
        return ctx

    def _apply(self, h: ModuleHandle, out: Output) -> None:
        name = h.name
        store_tags: set[str] | None = None
        sends = list(out.send_to)
        channels = list(out.channels)
        for sink in h.spec.outputs:
            if isinstance(sink, StoreMemory):
                store_tags = (store_tags or set()) | set(sink.tags)
            elif isinstance(sink, SendTo):
                sends.append(sink.module_name)
            elif isinstance(sink, SensorChannel):
                channels.append(sink.name)
        if store_tags is not None and out.store:
            self.memory.store(out.text, name, store_tags | set(out.tags))
        for target in dict.fromkeys(sends):
            self.bus.send(name, target, out.text, out.headers)
        for ch in dict.fromkeys(channels):
            self.sensors.write(ch, out.text, source=name)

    # failure & supervision -------------------------------------------------
    def _fail(self, h: ModuleHandle, error: str) -> None:
        if h.state is not ModuleState.ACTIVE:
            return
        self._transition(h, ModuleState.FAILED)
        h.last_error = error
        h.failed_at = self.clock.now()
        h.consecutive_failures += 1
        logger.warning("module %s failed: %s", h.name, error)
        self._event(h, "fail", None, error=error)
        if self._sup_wake is not None:
            self._sup_wake.set()

    def kill(self, ref: ModuleHandle | str, reason: str = "killed by operator") -> bool:
        """Inject a crash into a running module (fault-injection hook)."""
        h = self.handle(ref)
        if h.state is not ModuleState.ACTIVE:
            logger.warning("kill ignored: %s is %s", h.name, h.state.value)
            return False
        task = h.task
        if task is not None and not task.done() and task is not asyncio.current_task():
            task.cancel()
            h.task = None
        self._fail(h, reason)
        return True

    def _restart_due(self, h: ModuleHandle) -> float | None:
        if h.state is not ModuleState.FAILED or h.gave_up or not h.spec.supervisor.restart or h.failed_at is None:
            return None
        return h.failed_at + h.spec.supervisor.backoff(h.consecutive_failures)

    def supervisor_tick(self) -> list[RestartAction]:
        now = self.clock.now()
        actions = []
        for h in self.handles.values():
            due = self._restart_due(h)
            if due is None or now < due - 1e-9:
                continue
            policy = h.spec.supervisor
            while h.restart_times and now - h.restart_times[0] >= 3600.0:
                h.restart_times.popleft()
            if len(h.restart_times) >= policy.max_restarts_per_hour:
                h.gave_up = True
                msg = f"module {h.name} exceeded {policy.max_restarts_per_hour} restarts/hour; left Failed"
                self.alerts.append(msg)
                logger.error("operator alert: %s", msg)
                actions.append(RestartAction(h.name, "gave_up", self.now_ms(), h.restarts))
                continue
            self._restart(h, now)
            actions.append(RestartAction(h.name, "restarted", self.now_ms(), h.restarts))
        return actions

    def _restart(self, h: ModuleHandle, now: float) -> None:
        self._transition(h, ModuleState.ACTIVE)
        h.restarts += 1
        h.restart_times.append(now)
        h.scratch = {}
        h.failed_at = None
        h.active_event.set()
        self._event(h, "restart", None, restarts=h.restarts)
        if self._running:
            self._start_loop(h)

    def next_restart_due(self) -> float | None:
        dues = [d for d in (self._restart_due(h) for h in self.handles.values()) if d is not None]
        return min(dues) if dues else None

    async def _supervise(self) -> None:
        assert self._sup_wake is not None
        while self._running:
            self.supervisor_tick()
            due = self.next_restart_due()
            self._sup_wake.clear()
            timeout = None if due is None else max(0.0, due - self.clock.now())
            try:
                await self.clock.wait_for(self._sup_wake.wait(), timeout)
            except asyncio.TimeoutError:
                pass

    # activation ---------------------------------------------------------------
    def set_activation(self, ref: ModuleHandle | str, decision: ActivationDecision) -> ModuleStatus:
        h = self.handle(ref)
        if decision is ActivationDecision.ACTIVATE and h.state is ModuleState.DEACTIVATED:
            self._transition(h, ModuleState.ACTIVE)
            h.active_event.set()
            self._event(h, "activate")
            if self._running and (h.task is None or h.task.done()):
                self._start_loop(h)
        elif decision is ActivationDecision.DEACTIVATE and h.state is ModuleState.ACTIVE:
            self._transition(h, ModuleState.DEACTIVATED)
            h.active_event.clear()
            self._event(h, "deactivate")
        return h.status()

    # introspection ------------------------------------------------------------
    def status(self, ref: ModuleHandle | str) -> ModuleStatus:
        return self.handle(ref).status()

    def status_all(self) -> dict[str, ModuleStatus]:
        return {name: h.status() for name, h in self.handles.items()}

    def controlled(self) -> list[ModuleHandle]:
        return [h for h in self.handles.values() if h.spec.controlled]

    # prompt revisions -----------------------------------------------------------
    def update_prompt(self, ref: ModuleHandle | str, new_prompt: str, reason: str = "") -> PromptRevision | None:
        """Swap a module's live system prompt; takes effect on its next step.

        Rejected (returns ``None``) unless the new prompt keeps the module's
        immutable prefix and is at most four times the original length.
        """
        h = self.handle(ref)
        prefix = h.spec.immutable_prefix
        if not new_prompt.startswith(prefix):
            logger.warning("prompt revision for %s rejected: immutable prefix dropped", h.name)
            return None
        if len(new_prompt) > 4 * max(1, len(h.original_prompt)):
            logger.warning("prompt revision for %s rejected: %d chars exceeds 4x original", h.name, len(new_prompt))
            return None
        old = h.spec.system_prompt
        h.spec = replace(h.spec, system_prompt=new_prompt)
        rev = PromptRevision(h.name, old, new_prompt, reason, self.now_ms())
        self.revisions.append(rev)
        return rev


def _summarize(text: str, limit: int = 160) -> str:
    text = " ".join(text.split())
    return text if len(text) <= limit else text[: limit - 3] + "..."


# ------------------------------------------------------- activation control --
ACTIVATION_PROMPT = """You decide activate or deactivate the module named below. You are given its system_prompt and the robot's recent memory. Activate it if that memory shows it is needed now, otherwise deactivate it.

Rules:
1. Output should be only the activate or deactivate.
2. Reply with that single word and nothing else.
3. If you cannot decide, just write "None".

Example: activate"""

_DECISIONS = {
    "activate": ActivationDecision.ACTIVATE,
    "deactivate": ActivationDecision.DEACTIVATE,
    "none": ActivationDecision.NO_CHANGE,
}


def activation_user_message(target: ModuleSpec, memories: Sequence[MemoryRecord]) -> str:
    lines = "\n".join(f"- {m.text}" for m in memories) or "(no memories)"
    return f"target module: {target.name}\nsystem_prompt of the target module:\n{target.system_prompt}\n\nmemory:\n{lines}"


def parse_activation(text: str) -> ActivationDecision | None:
    """Strict parse; ``None`` means the output did not conform."""
    return _DECISIONS.get(text.strip().lower())


async def activation_decide(
    target_spec: ModuleSpec,
    memories: Iterable[MemoryRecord],
    gateway: Gateway,
    *,
    model_id: str = "default",
) -> ActivationDecision:
    request = ChatRequest.simple(ACTIVATION_PROMPT, activation_user_message(target_spec, list(memories)), model_id=model_id)
    try:
        response = await gateway.complete(request)
    except GatewayError as exc:
        logger.warning("activation controller: gateway error for %s (%s); no change", target_spec.name, exc)
        return ActivationDecision.NO_CHANGE
    decision = parse_activation(response.text)
    if decision is None:
        logger.warning("activation controller: nonconforming output for %s: %r", target_spec.name, response.text[:80])
        return ActivationDecision.NO_CHANGE
    return decision
