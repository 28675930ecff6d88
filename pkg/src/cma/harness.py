"""Scenario engine: scripted sensors, utterances, faults and assertions.

A scenario is a JSON file::

    {"agent": "plantbot", "duration_ms": 300000, "seed": 42,
     "gateway_rules": "plantbot_rules.jsonl",
     "self_improvement_silence_ms": 60000,
     "events": [{"at_ms": 0, "type": "sensor_write", "channel": "camera", "text": "..."}, ...]}

Event types: ``sensor_write``, ``user_utterance``, ``kill_module``,
``network_drop_adapter`` and ``assertion`` (``predicate`` plus ``args``).
"""

from __future__ import annotations

import asyncio
import csv
import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from html import escape
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, Union

from .agent import Agent, AgentDefinition
from .clock import Clock, run_virtual
from .errors import ScenarioParseError
from .gateway import Backend, ScriptedBackend
from .stdlib import data_path
from .stdlib.catalog import MAGI_RING
from .stdlib.modules import ring_successor
from .timeline import Timeline

logger = logging.getLogger(__name__)

DEFAULT_SILENCE_MS = 60_000


# -- events ------------------------------------------------------------------------
@dataclass(frozen=True)
class SensorWrite:
    at_ms: int
    channel: str
    text: str


@dataclass(frozen=True)
class UserUtterance:
    at_ms: int
    text: str


@dataclass(frozen=True)
class KillModule:
    at_ms: int
    module: str


@dataclass(frozen=True)
class NetworkDropAdapter:
    at_ms: int


@dataclass(frozen=True)
class Assertion:
    at_ms: int
    predicate: str
    args: Mapping[str, Any] = field(default_factory=dict)


Event = Union[SensorWrite, UserUtterance, KillModule, NetworkDropAdapter, Assertion]

_EVENT_FIELDS: dict[str, tuple[type, tuple[str, ...]]] = {
    "sensor_write": (SensorWrite, ("channel", "text")),
    "user_utterance": (UserUtterance, ("text",)),
    "kill_module": (KillModule, ("module",)),
    "network_drop_adapter": (NetworkDropAdapter, ()),
    "assertion": (Assertion, ("predicate",)),
}


@dataclass
class ScenarioScript:
    duration_ms: int
    events: list[Event]
    seed: int = 0
    gateway_rules: Path | None = None
    agent: str | None = None
    self_improvement_silence_ms: int = DEFAULT_SILENCE_MS
    source: Path | None = None

    @property
    def duration(self) -> float:
        return self.duration_ms / 1000.0


def _event_lines(text: str) -> list[int]:
    """1-based line of each element of the top-level ``events`` array."""
    m = re.search(r'"events"\s*:\s*\[', text)
    if not m:
        return []
    dec = json.JSONDecoder()
    pos, lines = m.end(), []
    try:
        while True:
            while pos < len(text) and text[pos] in " \t\r\n,":
                pos += 1
            if pos >= len(text) or text[pos] == "]":
                return lines
            lines.append(text.count("\n", 0, pos) + 1)
            _, pos = dec.raw_decode(text, pos)
    except json.JSONDecodeError:
        return lines


def _int(value: Any, what: str, line: int | None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise ScenarioParseError(f"{what} must be an integer", line=line)
    return int(value)


def parse_scenario(text: str, base_dir: str | Path | None = None) -> ScenarioScript:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(obj, dict):
        raise ScenarioParseError("scenario must be a JSON object", line=1)
    if "duration_ms" not in obj:
        raise ScenarioParseError("missing duration_ms", line=1)
    duration = _int(obj["duration_ms"], "duration_ms", 1)
    if duration <= 0:
        raise ScenarioParseError("duration_ms must be positive", line=1)
    raw_events = obj.get("events", [])
    if not isinstance(raw_events, list):
        raise ScenarioParseError("events must be an array", line=1)
    lines = _event_lines(text)
    events: list[Event] = []
    last_at = -1
    for i, raw in enumerate(raw_events):
        line = lines[i] if i < len(lines) else None
        if not isinstance(raw, dict):
            raise ScenarioParseError("event must be an object", line=line)
        kind = raw.get("type")
        if kind not in _EVENT_FIELDS:
            raise ScenarioParseError(f"unknown event type {kind!r}", line=line)
        if "at_ms" not in raw:
            raise ScenarioParseError("event needs at_ms", line=line)
        at = _int(raw["at_ms"], "at_ms", line)
        if at < 0 or at > duration:
            raise ScenarioParseError(f"at_ms {at} outside [0, {duration}]", line=line)
        if at < last_at:
            raise ScenarioParseError("events are not sorted by time", line=line)
        last_at = at
        cls, required = _EVENT_FIELDS[kind]
        values = {}
        for key in required:
            if not isinstance(raw.get(key), str):
                raise ScenarioParseError(f"{kind} needs string field {key!r}", line=line)
            values[key] = raw[key]
        if cls is Assertion:
            args = raw.get("args", {})
            if not isinstance(args, dict):
                raise ScenarioParseError("assertion args must be an object", line=line)
            if values["predicate"] not in PREDICATES:
                raise ScenarioParseError(f"unknown assertion predicate {values['predicate']!r}", line=line)
            values["args"] = args
        events.append(cls(at_ms=at, **values))
    rules = obj.get("gateway_rules")
    rules_path = None
    if rules is not None:
        rules_path = Path(rules)
        if base_dir is not None and not rules_path.is_absolute():
            rules_path = Path(base_dir) / rules_path
    return ScenarioScript(
        duration_ms=duration,
        events=events,
        seed=_int(obj.get("seed", 0), "seed", 1),
        gateway_rules=rules_path,
        agent=obj.get("agent"),
        self_improvement_silence_ms=_int(obj.get("self_improvement_silence_ms", DEFAULT_SILENCE_MS), "self_improvement_silence_ms", 1),
    )


def load_scenario(path: str | Path) -> ScenarioScript:
    path = Path(path)
    script = parse_scenario(path.read_text(encoding="utf-8"), path.parent)
    script.source = path
    return script


# -- assertions -------------------------------------------------------------------
@dataclass(frozen=True)
class AssertionResult:
    predicate: str
    at_ms: int
    passed: bool
    detail: str = ""
    args: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class Observation:
    """What an assertion may look at: the timeline, statuses and global memory."""

    agent: Agent
    args: Mapping[str, Any]

    @property
    def timeline(self) -> Timeline:
        return self.agent.timeline


Predicate = Callable[[Observation], tuple[bool, str]]
PREDICATES: dict[str, Predicate] = {}


def predicate(name: str):
    def register(fn: Predicate) -> Predicate:
        PREDICATES[name] = fn
        return fn

    return register


@predicate("all_modules_stepped")
def _all_stepped(obs: Observation) -> tuple[bool, str]:
    stepped = {e.module for e in obs.timeline if e.kind == "step"}
    missing = sorted(set(obs.agent.runtime.handles) - stepped)
    return not missing, f"no step events: {missing}" if missing else "every module stepped"


@predicate("restarted")
def _restarted(obs: Observation) -> tuple[bool, str]:
    name = obs.args["module"]
    kinds = [e.kind for e in obs.timeline.for_module(name)]
    ok = "fail" in kinds and "restart" in kinds[kinds.index("fail"):]
    return ok, f"{name}: fails={kinds.count('fail')} restarts={kinds.count('restart')}"


def toggle_count(timeline: Timeline, module: str) -> int:
    """Number of deactivate -> activate pairs for ``module``."""
    pairs, off = 0, False
    for e in timeline.for_module(module):
        if e.kind == "deactivate":
            off = True
        elif e.kind == "activate" and off:
            pairs += 1
            off = False
    return pairs


@predicate("toggled")
def _toggled(obs: Observation) -> tuple[bool, str]:
    name, need = obs.args["module"], int(obs.args.get("min", 1))
    n = toggle_count(obs.timeline, name)
    return n >= need, f"{name}: {n} deactivate/activate pairs (need {need})"


@predicate("memory_tagged")
def _memory_tagged(obs: Observation) -> tuple[bool, str]:
    tag, text = obs.args["tag"], obs.args.get("text")
    recs = obs.agent.memory.tagged(tag)
    if text is not None:
        recs = [r for r in recs if text in r.text]
    return bool(recs), f"{len(recs)} live records tagged {tag!r}"


@predicate("memory_count_at_most")
def _memory_count(obs: Observation) -> tuple[bool, str]:
    n = obs.agent.memory.count()
    return n <= int(obs.args["n"]), f"live count {n}"


@predicate("no_alerts")
def _no_alerts(obs: Observation) -> tuple[bool, str]:
    alerts = obs.agent.runtime.alerts
    return not alerts, "; ".join(alerts) or "no operator alerts"


@predicate("module_state")
def _module_state(obs: Observation) -> tuple[bool, str]:
    st = obs.agent.runtime.status(obs.args["module"]).state
    return st.value == obs.args["state"], f"state {st.value}"


def magi_order_violations(timeline: Timeline, ring: Sequence[str] = MAGI_RING) -> list[str]:
    """Consecutive magi outputs that break the cyclic order among active magi."""
    active = set(ring)
    last: str | None = None
    bad = []
    for e in timeline:
        if e.module not in ring:
            continue
        if e.kind == "deactivate":
            active.discard(e.module)
        elif e.kind == "activate":
            active.add(e.module)
        elif e.kind == "output":
            if last is not None:
                expected = ring_successor(ring, last, active | {e.module})
                if e.module != expected:
                    bad.append(f"{last} -> {e.module} at {e.ts} (expected {expected})")
            last = e.module
    return bad


@predicate("magi_cycle")
def _magi_cycle(obs: Observation) -> tuple[bool, str]:
    ring = tuple(obs.args.get("ring", MAGI_RING))
    bad = magi_order_violations(obs.timeline, ring)
    return not bad, "; ".join(bad[:3]) or "cyclic order held"


@predicate("prompt_prefixes_intact")
def _prefixes(obs: Observation) -> tuple[bool, str]:
    broken = [h.name for h in obs.agent.runtime.handles.values() if not h.spec.system_prompt.startswith(h.spec.immutable_prefix)]
    return not broken, f"broken prefixes: {broken}" if broken else "all prefixes intact"


def evaluate(agent: Agent, a: Assertion) -> AssertionResult:
    try:
        ok, detail = PREDICATES[a.predicate](Observation(agent, a.args))
    except Exception as exc:  # a broken predicate is a failed assertion, not a crash
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return AssertionResult(a.predicate, a.at_ms, ok, detail, dict(a.args))


# -- running --------------------------------------------------------------------
@dataclass
class RunReport:
    timeline: Timeline
    assertions: list[AssertionResult]
    counters: dict[str, Any]
    logdir: Path | None = None
    statuses: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(a.passed for a in self.assertions)


def resolve_agent(script: ScenarioScript, defn: AgentDefinition | str | Path | None) -> AgentDefinition:
    if isinstance(defn, AgentDefinition):
        return defn
    if defn is None:
        if script.agent is None:
            raise ValueError("scenario names no agent and none was given")
        return AgentDefinition.load(data_path(f"{script.agent}.json"))
    return AgentDefinition.load(defn)


async def run_scenario_async(
    script: ScenarioScript,
    defn: AgentDefinition,
    *,
    clock: Clock,
    logdir: str | Path | None = None,
    backend: Backend | None = None,
    behavior_wrappers: Mapping[str, Callable] | None = None,
    on_start: Callable[[Agent], Any] | None = None,
) -> RunReport:
    defn = dataclasses.replace(defn, seed=script.seed)
    if backend is None and script.gateway_rules is not None:
        backend = ScriptedBackend.from_file(script.gateway_rules)
    logdir = Path(logdir) if logdir is not None else None
    if logdir is not None:
        logdir.mkdir(parents=True, exist_ok=True)
    clock.bind()
    agent = Agent(
        defn, clock=clock, backend=backend, logdir=logdir, behavior_wrappers=behavior_wrappers, fresh_logs=True
    )
    counters: dict[str, Any] = {"events_applied": 0, "kills": 0, "network_drops": 0}
    results: list[AssertionResult] = []
    silence = script.self_improvement_silence_ms / 1000.0

    async def inject() -> None:
        for ev in script.events:
            await clock.sleep_until(ev.at_ms / 1000.0)
            counters["events_applied"] += 1
            if isinstance(ev, SensorWrite):
                agent.sensor_write(ev.channel, ev.text)
            elif isinstance(ev, UserUtterance):
                agent.utterance(ev.text)
            elif isinstance(ev, KillModule):
                counters["kills"] += int(agent.runtime.kill(ev.module, reason="scenario kill"))
            elif isinstance(ev, NetworkDropAdapter):
                counters["network_drops"] += 1
                if agent.adapter is not None:
                    agent.adapter.drop()
                else:
                    logger.info("network_drop_adapter at %d ms: no adapter attached", ev.at_ms)
            elif isinstance(ev, Assertion):
                results.append(evaluate(agent, ev))

    async def watch_mode() -> None:
        # self-improvement mode while nobody has spoken for `silence` seconds
        while True:
            last = agent.last_utterance_at if agent.last_utterance_at is not None else 0.0
            idle = clock.now() - last
            agent.runtime.mode = "self_improvement" if idle >= silence else "interactive"
            await clock.sleep(min(1.0, max(0.001, silence - idle)) if idle < silence else 1.0)

    await agent.start()
    if on_start is not None:
        on_start(agent)
    injector = asyncio.create_task(inject(), name="scenario-injector")
    watcher = asyncio.create_task(watch_mode(), name="mode-watcher")
    try:
        await clock.sleep_until(script.duration)
        await injector
    finally:
        for t in (injector, watcher):
            t.cancel()
        await asyncio.gather(injector, watcher, return_exceptions=True)
        await agent.stop()
    if logdir is not None:
        agent.timeline.to_jsonl(logdir / "timeline.jsonl")
    bus = agent.bus.counters.as_dict()
    counters.update(
        {
            "bus_published": bus["published"],
            "bus_delivered": bus["delivered"],
            "bus_dropped": bus["dropped"],
            "gateway_calls": agent.gateway.calls,
            "memory_live": agent.memory.count(),
            "restarts": {n: h.restarts for n, h in agent.runtime.handles.items() if h.restarts},
            "alerts": list(agent.runtime.alerts),
        }
    )
    statuses = {n: st.state.value for n, st in agent.runtime.status_all().items()}
    return RunReport(agent.timeline, results, counters, logdir, statuses)


def run_scenario(
    script: ScenarioScript | str | Path,
    defn: AgentDefinition | str | Path | None = None,
    *,
    clock: str = "virtual",
    speed: float = 1.0,
    duration_ms: int | None = None,
    logdir: str | Path | None = None,
    backend: Backend | None = None,
    behavior_wrappers: Mapping[str, Callable] | None = None,
) -> RunReport:
    """Run one scenario to completion and return its report.

    ``clock="virtual"`` (default) simulates time, so a five-minute scenario
    finishes in well under a second; ``clock="real"`` sleeps for real,
    divided by ``speed``.
    """
    if not isinstance(script, ScenarioScript):
        script = load_scenario(script)
    if duration_ms is not None:
        script = dataclasses.replace(
            script, duration_ms=duration_ms, events=[e for e in script.events if e.at_ms <= duration_ms]
        )
    agent_def = resolve_agent(script, defn)
    if clock not in ("virtual", "real"):
        raise ValueError("clock must be 'virtual' or 'real'")

    async def main() -> RunReport:
        return await run_scenario_async(
            script,
            agent_def,
            clock=Clock(speed),
            logdir=logdir,
            backend=backend,
            behavior_wrappers=behavior_wrappers,
        )

    if clock == "virtual":
        return run_virtual(main)
    return asyncio.run(main())


# -- export -------------------------------------------------------------------------
def export_csv(timeline: Timeline, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["ts", "module", "kind"])
        for e in timeline:
            w.writerow([e.ts, e.module, e.kind])
    return path


def read_csv(path: str | Path) -> Timeline:
    tl = Timeline()
    with Path(path).open(newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            tl.append(int(row["ts"]), row["module"], row["kind"])
    return tl


def render_svg(timeline: Timeline, *, width: int = 1000, lane_height: int = 22, label_width: int = 180) -> str:
    modules = timeline.modules()
    events = list(timeline)
    t0 = min((e.ts for e in events), default=0)
    t1 = max((e.ts for e in events), default=t0)
    span = max(1, t1 - t0)
    plot_w = width - label_width - 20
    height = 40 + lane_height * max(1, len(modules))

    def x(ts: int) -> float:
        return label_width + plot_w * (ts - t0) / span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<style>text{font:11px sans-serif}.output{fill:#1f6fb4}.lane{stroke:#ddd}</style>',
    ]
    lane = {m: i for i, m in enumerate(modules)}
    for m, i in lane.items():
        y = 20 + lane_height * i + lane_height / 2
        parts.append(f'<g class="lane-group" data-module="{escape(m)}">')
        parts.append(f'<text x="4" y="{y + 4:.1f}">{escape(m)}</text>')
        parts.append(f'<line class="lane" x1="{label_width}" y1="{y:.1f}" x2="{label_width + plot_w}" y2="{y:.1f}"/>')
        parts.append("</g>")
    for e in events:
        if e.kind != "output":
            continue
        y = 20 + lane_height * lane[e.module] + lane_height / 2
        parts.append(f'<circle class="output" data-module="{escape(e.module)}" data-ts="{e.ts}" cx="{x(e.ts):.2f}" cy="{y:.1f}" r="2.5"/>')
    axis_y = height - 12
    for k in range(6):
        ts = t0 + span * k / 5
        parts.append(f'<text x="{x(int(ts)):.1f}" y="{axis_y}" text-anchor="middle">{(ts - t0) / 1000:.0f}s</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_timeline(timeline: Timeline, fmt: str, path: str | Path) -> Path:
    """Write the timeline as ``csv`` or ``svg``."""
    if fmt == "csv":
        return export_csv(timeline, path)
    if fmt == "svg":
        path = Path(path)
        path.write_text(render_svg(timeline), encoding="utf-8")
        return path
    raise ValueError(f"unknown timeline format {fmt!r}")
