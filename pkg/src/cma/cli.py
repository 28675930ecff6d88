"""``cma`` command line: validate, run, chat, inject, memory, timeline.

Exit codes: 0 success, 1 failure (assertions failed, runtime error),
2 configuration error.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from .agent import OPERATOR, Agent, AgentDefinition, load_definition, operator_command, validate
from .clock import Clock, run_virtual
from .errors import AdapterError, CMAError, ConfigError, ScenarioParseError
from .memory import MemoryStore

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
REPLY_TIMEOUT_S = 60.0


def _out(*parts: object) -> None:
    print(*parts, flush=True)


def _err(*parts: object) -> None:
    print(*parts, file=sys.stderr, flush=True)


# -- validate -------------------------------------------------------------------
def cmd_validate(args: argparse.Namespace) -> int:
    try:
        defn = AgentDefinition.load(args.config)
    except ConfigError as exc:
        for d in exc.diagnostics or [str(exc)]:
            _out(str(d))
        return EXIT_CONFIG
    diags = validate(defn)
    for d in diags:
        _out(str(d))
    if any(d.level == "error" for d in diags):
        return EXIT_CONFIG
    _out(f"ok: {defn.agent_id}, {len(defn.modules)} modules")
    return EXIT_OK


# -- run ------------------------------------------------------------------------------
def cmd_run(args: argparse.Namespace) -> int:
    from .harness import export_timeline, load_scenario, run_scenario

    defn = load_definition(args.config)
    if args.scenario:
        script = load_scenario(args.scenario)
        duration_ms = int(args.duration * 1000) if args.duration is not None else None
        report = run_scenario(
            script,
            defn,
            clock=args.clock or "virtual",
            speed=args.speed,
            duration_ms=duration_ms,
            logdir=args.logdir,
        )
        for a in report.assertions:
            _out(f"{'PASS' if a.passed else 'FAIL'} {a.predicate} {dict(a.args) or ''} at {a.at_ms} ms: {a.detail}".replace("  ", " "))
        _out(f"events={len(report.timeline)} gateway_calls={report.counters['gateway_calls']} memory_live={report.counters['memory_live']}")
        if args.logdir:
            export_timeline(report.timeline, "csv", Path(args.logdir) / "timeline.csv")
        return EXIT_OK if report.ok else EXIT_FAIL

    duration = args.duration

    async def live() -> int:
        clock = Clock(args.speed)
        clock.bind()
        agent = Agent(defn, clock=clock, logdir=args.logdir)
        await agent.start()
        _out(f"running {defn.agent_id} with {len(agent.runtime.handles)} modules; Ctrl-C to stop")
        try:
            if duration is None:
                await asyncio.Event().wait()
            else:
                await clock.sleep(duration)
        finally:
            await agent.stop()
        for name, st in agent.runtime.status_all().items():
            _out(f"{name}: {st.state.value} restarts={st.restarts}")
        return EXIT_OK

    try:
        if args.clock == "virtual":
            if duration is None:
                _err("--clock virtual without --scenario needs --duration")
                return EXIT_CONFIG
            return run_virtual(live)
        return asyncio.run(live())
    except KeyboardInterrupt:
        return EXIT_OK


# -- chat -------------------------------------------------------------------------------
def _format_record(rec, score: float | None = None) -> str:
    tags = ",".join(sorted(rec.tags)) or "-"
    head = f"{rec.id}  {rec.source_module:<22} [{tags}]"
    if score is not None:
        head += f"  score={score:.4f}"
    return f"{head}  {rec.text}"


async def _chat(defn: AgentDefinition, args: argparse.Namespace, stdin) -> int:
    clock = Clock(args.speed)
    clock.bind()
    agent = Agent(defn, clock=clock, logdir=args.logdir)
    if agent.conversation_module is None:
        _err("agent has no conversation module")
        return EXIT_CONFIG
    await agent.start()
    _out(f"chatting with {defn.agent_id} via {agent.conversation_module}; /status, /memory <query>, /quit")
    try:
        while True:
            line = await asyncio.to_thread(stdin.readline)
            if not line:
                break
            line = line.strip()
            if not line:
                continue
            if line == "/quit":
                break
            if line == "/status":
                for name, st in agent.runtime.status_all().items():
                    err = f" last_error={st.last_error}" if st.last_error else ""
                    _out(f"{name}: {st.state.value} restarts={st.restarts}{err}")
                continue
            if line.startswith("/memory"):
                query = line[len("/memory"):].strip()
                hits = agent.memory.query(query, args.k) if query else []
                if not query:
                    for rec in agent.memory.recent(args.k):
                        _out(_format_record(rec))
                for h in hits:
                    _out(_format_record(h.record, h.score))
                if query and not hits:
                    _out("(no matches)")
                continue
            if line.startswith("/"):
                _out(f"unknown command {line.split()[0]}")
                continue
            assert agent.replies is not None
            while not agent.replies.empty():
                agent.replies.get_nowait()
            agent.utterance(line)
            try:
                reply = await clock.wait_for(agent.replies.get(), REPLY_TIMEOUT_S)
            except asyncio.TimeoutError:
                _out("(no reply)")
                continue
            _out(f"{defn.agent_id}> {reply}")
    finally:
        await agent.stop()
    return EXIT_OK


def cmd_chat(args: argparse.Namespace) -> int:
    defn = load_definition(args.config)
    try:
        return asyncio.run(_chat(defn, args, sys.stdin))
    except KeyboardInterrupt:
        return EXIT_OK


# -- inject -----------------------------------------------------------------------------
def cmd_inject(args: argparse.Namespace) -> int:
    from .bus import Bus
    from .mqtt_adapter import external_adapter_connect

    defn = load_definition(args.config)
    broker = args.broker or defn.bus.get("broker")
    if defn.bus.get("type") != "mqtt" and not args.broker:
        _err("inject needs an agent on an mqtt bus (or --broker host:port)")
        return EXIT_CONFIG
    if args.utterance:
        body = operator_command("utterance", text=args.text)
    else:
        body = operator_command("sensor_write", channel=args.channel, text=args.text)
    bus = Bus(defn.agent_id)
    bus.start()
    try:
        adapter = external_adapter_connect(bus, broker, defn.agent_id, timeout=args.timeout)
    except AdapterError as exc:
        _err(f"cannot reach broker {broker}: {exc}")
        return EXIT_FAIL
    try:
        bus.send("cli", OPERATOR, body)
        time.sleep(0.2)  # let the network loop flush the QoS 0 publish
    finally:
        adapter.close()
        bus.stop()
    _out("ok")
    return EXIT_OK


# -- memory ---------------------------------------------------------------------------
def _memory_store(args: argparse.Namespace) -> MemoryStore:
    if args.path:
        return MemoryStore(args.path)
    defn = load_definition(args.config)
    path = defn.memory.get("path")
    if not path:
        raise ConfigError("agent definition has no memory.path; pass --path")
    return MemoryStore(defn.resolve(path), dim=int(defn.memory.get("dim", 256)))


def cmd_memory(args: argparse.Namespace) -> int:
    if not args.config and not args.path:
        _err("memory needs a config or --path")
        return EXIT_CONFIG
    with _memory_store(args) as store:
        if args.action == "count":
            _out(store.count())
        elif args.action == "ls":
            for rec in store.recent(args.n):
                _out(_format_record(rec))
        elif args.action == "query":
            if not args.text:
                _err("memory query needs text")
                return EXIT_CONFIG
            for h in store.query(" ".join(args.text), args.k):
                _out(_format_record(h.record, h.score))
    return EXIT_OK


# -- timeline -----------------------------------------------------------------------------
def cmd_timeline(args: argparse.Namespace) -> int:
    from .harness import export_timeline
    from .timeline import Timeline, timeline_from_logs

    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        _err(f"no such run directory: {run_dir}")
        return EXIT_FAIL
    tl_path = run_dir / "timeline.jsonl"
    timeline = Timeline.from_jsonl(tl_path) if tl_path.exists() else timeline_from_logs(run_dir)
    out = Path(args.out) if args.out else run_dir / f"timeline.{args.format}"
    export_timeline(timeline, args.format, out)
    _out(f"wrote {out} ({len(timeline)} events)")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cma", description="Run modular LLM agents.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check an agent definition")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("run", help="run an agent, optionally under a scenario")
    s.add_argument("config")
    s.add_argument("--scenario")
    s.add_argument("--speed", type=float, default=1.0, help="time acceleration factor")
    s.add_argument("--duration", type=float, help="seconds of agent time to run")
    s.add_argument("--clock", choices=("virtual", "real"), help="default: virtual with --scenario, real otherwise")
    s.add_argument("--logdir")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("chat", help="talk to the conversation module")
    s.add_argument("config")
    s.add_argument("--speed", type=float, default=1.0)
    s.add_argument("--logdir")
    s.add_argument("-k", type=int, default=5, help="results shown by /memory")
    s.set_defaults(func=cmd_chat)

    s = sub.add_parser("inject", help="write a sensor sample into a running agent")
    s.add_argument("config")
    s.add_argument("channel")
    s.add_argument("text")
    s.add_argument("--utterance", action="store_true", help="send TEXT as a user utterance instead")
    s.add_argument("--broker", help="host:port (default: the config's bus.broker)")
    s.add_argument("--timeout", type=float, default=5.0)
    s.set_defaults(func=cmd_inject)

    s = sub.add_parser("memory", help="inspect a persisted memory store")
    s.add_argument("action", choices=("ls", "query", "count"))
    s.add_argument("text", nargs="*")
    s.add_argument("--config")
    s.add_argument("--path", help="memory log file (overrides the config)")
    s.add_argument("-n", type=int, default=20)
    s.add_argument("-k", type=int, default=5)
    s.set_defaults(func=cmd_memory)

    s = sub.add_parser("timeline", help="export a run's timeline")
    s.add_argument("run_dir")
    s.add_argument("--format", choices=("csv", "svg"), default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_timeline)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioParseError) as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except CMAError as exc:
        _err(f"error: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
