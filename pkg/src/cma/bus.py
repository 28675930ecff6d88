"""One-to-one text messaging between named modules over a topic space.

Every module owns one inbox topic, ``cma/<agent_id>/module/<name>/inbox``.
The in-process :class:`Bus` routes envelopes to bounded per-subscriber
queues with at-most-once delivery; :mod:`cma.mqtt_adapter` mirrors the same
topics and payloads onto an external MQTT broker.
"""

from __future__ import annotations

import asyncio
import json
import logging
import random
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

from .errors import (
    BusStoppedError,
    DuplicateSubscriptionError,
    InvalidNameError,
    MalformedPayloadError,
)

logger = logging.getLogger(__name__)

TOPIC_PREFIX = "cma"
FORBIDDEN_CHARS = frozenset("/+#")
DEFAULT_QUEUE_SIZE = 1024
WIRE_KEYS = ("msg_id", "agent_id", "from", "to", "sent_at", "body", "headers")


def check_name(name: object, what: str = "name") -> str:
    if not isinstance(name, str) or not name:
        raise InvalidNameError(f"{what} must be a non-empty string, got {name!r}")
    bad = FORBIDDEN_CHARS.intersection(name)
    if bad:
        raise InvalidNameError(f"{what} {name!r} contains forbidden character(s) {''.join(sorted(bad))!r}")
    return name


def topic_for(agent_id: str, module_name: str) -> str:
    check_name(agent_id, "agent_id")
    check_name(module_name, "module name")
    return f"{TOPIC_PREFIX}/{agent_id}/module/{module_name}/inbox"


def parse_topic(topic: str) -> tuple[str, str]:
    """Inverse of :func:`topic_for`; returns ``(agent_id, module_name)``."""
    parts = topic.split("/")
    if len(parts) != 5 or parts[0] != TOPIC_PREFIX or parts[2] != "module" or parts[4] != "inbox":
        raise InvalidNameError(f"not an inbox topic: {topic!r}")
    return check_name(parts[1], "agent_id"), check_name(parts[3], "module name")


@dataclass(frozen=True)
class Envelope:
    msg_id: str
    agent_id: str
    from_module: str
    to_module: str
    sent_at: int  # epoch ms, UTC
    body: str
    headers: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        check_name(self.agent_id, "agent_id")
        check_name(self.from_module, "from_module")
        check_name(self.to_module, "to_module")
        if not isinstance(self.msg_id, str) or not self.msg_id:
            raise InvalidNameError("msg_id must be a non-empty string")
        if not isinstance(self.sent_at, int) or isinstance(self.sent_at, bool):
            raise TypeError("sent_at must be integer epoch milliseconds")
        if not isinstance(self.body, str):
            raise TypeError("body must be str")
        for k, v in self.headers.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise TypeError("headers must map str to str")
        object.__setattr__(self, "headers", dict(self.headers))

    @property
    def topic(self) -> str:
        return topic_for(self.agent_id, self.to_module)

    def __hash__(self) -> int:
        return hash(self.msg_id)


def encode(envelope: Envelope) -> bytes:
    """Canonical UTF-8 JSON: fixed key order, sorted headers, no whitespace."""
    obj = {
        "msg_id": envelope.msg_id,
        "agent_id": envelope.agent_id,
        "from": envelope.from_module,
        "to": envelope.to_module,
        "sent_at": envelope.sent_at,
        "body": envelope.body,
        "headers": {k: envelope.headers[k] for k in sorted(envelope.headers)},
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def decode(payload: bytes | str) -> Envelope:
    try:
        obj = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayloadError(f"invalid JSON payload: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedPayloadError("payload must be a JSON object")
    for key in WIRE_KEYS[:-1]:
        if key not in obj:
            raise MalformedPayloadError(f"missing required key {key!r}", key=key)
    headers = obj.get("headers", {})
    if not isinstance(headers, dict):
        raise MalformedPayloadError("headers must be an object", key="headers")
    try:
        return Envelope(
            msg_id=obj["msg_id"],
            agent_id=obj["agent_id"],
            from_module=obj["from"],
            to_module=obj["to"],
            sent_at=obj["sent_at"],
            body=obj["body"],
            headers=headers,
        )
    except (TypeError, InvalidNameError) as exc:
        raise MalformedPayloadError(f"invalid field: {exc}") from None


@dataclass(frozen=True)
class Receipt:
    msg_id: str
    enqueued_at: int
    topic: str
    delivered: bool


class Subscription:
    """Bounded inbox stream owned by exactly one module.

    On overflow the oldest queued envelope is evicted and counted as dropped.
    """

    def __init__(self, bus: "Bus", module_name: str, maxsize: int) -> None:
        self.bus = bus
        self.module_name = module_name
        self.topic = topic_for(bus.agent_id, module_name)
        self.maxsize = maxsize
        self._items: deque[Envelope] = deque()
        self._lock = threading.Lock()
        self._waiters: list[tuple[asyncio.AbstractEventLoop, asyncio.Future]] = []
        self.closed = False

    def __len__(self) -> int:
        return len(self._items)

    def _put(self, env: Envelope) -> int:
        """Enqueue; returns how many old envelopes were evicted."""
        with self._lock:
            evicted = 0
            while len(self._items) >= self.maxsize:
                self._items.popleft()
                evicted += 1
            self._items.append(env)
            waiters, self._waiters = self._waiters, []
        for loop, fut in waiters:
            _wake(loop, fut)
        return evicted

    def get_nowait(self) -> Envelope:
        with self._lock:
            if not self._items:
                raise asyncio.QueueEmpty
            env = self._items.popleft()
        self.bus._count_delivered(1)
        return env

    def drain(self, limit: int | None = None) -> list[Envelope]:
        with self._lock:
            n = len(self._items) if limit is None else min(limit, len(self._items))
            out = [self._items.popleft() for _ in range(n)]
        if out:
            self.bus._count_delivered(len(out))
        return out

    def peek(self) -> Envelope | None:
        with self._lock:
            return self._items[0] if self._items else None

    async def wait_nonempty(self) -> None:
        """Block until at least one envelope is queued (does not consume it)."""
        while True:
            loop = asyncio.get_running_loop()
            with self._lock:
                if self._items:
                    return
                if self.closed:
                    raise BusStoppedError(f"subscription {self.module_name!r} closed")
                fut = loop.create_future()
                self._waiters.append((loop, fut))
            try:
                await fut
            finally:
                if not fut.done():
                    fut.cancel()

    async def get(self) -> Envelope:
        while True:
            await self.wait_nonempty()
            try:
                return self.get_nowait()
            except asyncio.QueueEmpty:
                continue

    def __aiter__(self):
        return self

    async def __anext__(self) -> Envelope:
        try:
            return await self.get()
        except BusStoppedError:
            raise StopAsyncIteration from None

    def close(self) -> None:
        with self._lock:
            if self.closed:
                return
            self.closed = True
            leftover = len(self._items)
            self._items.clear()
            waiters, self._waiters = self._waiters, []
        if leftover:
            self.bus._count_dropped(leftover, reason="unsubscribed", topic=self.topic)
        for loop, fut in waiters:
            _wake(loop, fut)
        self.bus._forget(self)


def _wake(loop: asyncio.AbstractEventLoop, fut: asyncio.Future) -> None:
    def _set() -> None:
        if not fut.done():
            fut.set_result(None)

    try:
        running = asyncio.get_running_loop()
    except RuntimeError:
        running = None
    if running is loop:
        _set()
    elif not loop.is_closed():
        loop.call_soon_threadsafe(_set)


@dataclass
class BusCounters:
    published: int = 0
    delivered: int = 0
    dropped: int = 0

    def as_dict(self) -> dict[str, int]:
        return {"published": self.published, "delivered": self.delivered, "dropped": self.dropped}


Tap = Callable[[Envelope, bytes], None]


class Bus:
    """In-process broker: one bounded inbox per module, at-most-once delivery.

    ``publish`` never waits for consumers, so a stalled subscriber cannot
    block anyone. ``published == delivered + dropped + queued`` holds at all
    times; after quiescence ``queued`` is zero.
    """

    def __init__(
        self,
        agent_id: str,
        *,
        queue_size: int = DEFAULT_QUEUE_SIZE,
        now_ms: Callable[[], int] | None = None,
        rng: random.Random | None = None,
    ) -> None:
        self.agent_id = check_name(agent_id, "agent_id")
        self.queue_size = queue_size
        self.now_ms = now_ms or (lambda: int(time.time() * 1000))
        self._rng = rng
        self._subs: dict[str, Subscription] = {}
        self._lock = threading.RLock()
        self._taps: list[Tap] = []
        self.counters = BusCounters()
        self._running = True

    # lifecycle -----------------------------------------------------------
    @property
    def running(self) -> bool:
        return self._running

    def start(self) -> None:
        self._running = True

    def stop(self) -> None:
        with self._lock:
            self._running = False
            subs = list(self._subs.values())
        for sub in subs:
            sub.close()

    # ids -----------------------------------------------------------------
    def new_msg_id(self) -> str:
        if self._rng is None:
            return str(uuid.uuid4())
        with self._lock:
            bits = self._rng.getrandbits(128)
        return str(uuid.UUID(int=bits, version=4))

    # routing -------------------------------------------------------------
    def subscribe(self, module_name: str) -> Subscription:
        check_name(module_name, "module name")
        with self._lock:
            if not self._running:
                raise BusStoppedError("bus is stopped")
            if module_name in self._subs:
                raise DuplicateSubscriptionError(f"module {module_name!r} already has an active subscription")
            sub = Subscription(self, module_name, self.queue_size)
            self._subs[module_name] = sub
            return sub

    def subscribers(self) -> list[str]:
        with self._lock:
            return sorted(self._subs)

    def _forget(self, sub: Subscription) -> None:
        with self._lock:
            if self._subs.get(sub.module_name) is sub:
                del self._subs[sub.module_name]

    def add_tap(self, tap: Tap) -> None:
        """Observe every locally published envelope (used by bridges)."""
        with self._lock:
            self._taps.append(tap)

    def remove_tap(self, tap: Tap) -> None:
        with self._lock:
            if tap in self._taps:
                self._taps.remove(tap)

    def envelope(self, from_module: str, to_module: str, body: str, headers: Mapping[str, str] | None = None) -> Envelope:
        return Envelope(
            msg_id=self.new_msg_id(),
            agent_id=self.agent_id,
            from_module=from_module,
            to_module=to_module,
            sent_at=self.now_ms(),
            body=body,
            headers=dict(headers or {}),
        )

    def send(self, from_module: str, to_module: str, body: str, headers: Mapping[str, str] | None = None) -> Receipt:
        return self.publish(self.envelope(from_module, to_module, body, headers))

    def publish(self, envelope: Envelope) -> Receipt:
        receipt = self._route(envelope)
        with self._lock:
            taps = list(self._taps)
        if taps:
            payload = encode(envelope)
            for tap in taps:
                try:
                    tap(envelope, payload)
                except Exception:  # a broken bridge never affects local delivery
                    logger.exception("bus tap failed for %s", envelope.msg_id)
        return receipt

    def inject(self, envelope: Envelope) -> Receipt:
        """Deliver an envelope that arrived from outside, without re-mirroring it."""
        return self._route(envelope)

    def _route(self, envelope: Envelope) -> Receipt:
        topic = envelope.topic
        with self._lock:
            if not self._running:
                raise BusStoppedError("bus is stopped")
            self.counters.published += 1
            sub = self._subs.get(envelope.to_module) if envelope.agent_id == self.agent_id else None
        if sub is None:
            self._count_dropped(1, reason="no subscriber", topic=topic)
            delivered = False
        else:
            evicted = sub._put(envelope)
            if evicted:
                self._count_dropped(evicted, reason="queue overflow", topic=topic)
            delivered = True
        return Receipt(envelope.msg_id, self.now_ms(), topic, delivered)

    # counters ------------------------------------------------------------
    def _count_delivered(self, n: int) -> None:
        with self._lock:
            self.counters.delivered += n

    def _count_dropped(self, n: int, *, reason: str, topic: str) -> None:
        with self._lock:
            self.counters.dropped += n
        logger.info("dropped %d message(s) on %s: %s", n, topic, reason)

    def queued(self) -> int:
        with self._lock:
            return sum(len(s) for s in self._subs.values())

    def conservation_holds(self) -> bool:
        with self._lock:
            c = self.counters
            return c.published == c.delivered + c.dropped + sum(len(s) for s in self._subs.values())

    def __iter__(self) -> Iterator[Subscription]:
        with self._lock:
            return iter(list(self._subs.values()))
