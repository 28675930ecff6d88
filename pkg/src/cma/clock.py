"""Time sources for the runtime.

Everything that sleeps or stamps time goes through a :class:`Clock`, so the
same agent can run against the wall clock or inside a :class:`VirtualTimeLoop`
where idle periods are skipped instantly and runs are reproducible.
"""

from __future__ import annotations

import asyncio
import selectors
import time
from typing import Any, Awaitable, Callable, TypeVar

T = TypeVar("T")

# 2025-06-01T00:00:00Z; virtual runs stamp records relative to this
VIRTUAL_EPOCH_MS = 1_748_736_000_000


class _SkippingSelector(selectors.BaseSelector):
    """Selector that polls real I/O without blocking and then jumps time."""

    def __init__(self, loop: "VirtualTimeLoop") -> None:
        self._loop = loop
        self._real = selectors.DefaultSelector()

    def register(self, fileobj, events, data=None):
        return self._real.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._real.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._real.modify(fileobj, events, data)

    def select(self, timeout=None):
        ready = self._real.select(0)
        if ready:
            return ready
        if timeout is None:
            # nothing scheduled at all: only a thread or socket can wake us
            return self._real.select(None)
        if timeout > 0:
            self._loop._advance(timeout)
        return []

    def close(self):
        self._real.close()

    def get_map(self):
        return self._real.get_map()

    def get_key(self, fileobj):
        return self._real.get_key(fileobj)


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    """Event loop whose ``time()`` only moves when every task is waiting.

    Scheduling order is the normal asyncio FIFO order, so a run that does no
    real I/O is fully deterministic.
    """

    def __init__(self) -> None:
        self._vtime = 0.0
        super().__init__(selector=_SkippingSelector(self))

    def time(self) -> float:
        return self._vtime

    def _advance(self, dt: float) -> None:
        self._vtime += dt


def run_virtual(main: Awaitable[T] | Callable[[], Awaitable[T]]) -> T:
    """Run a coroutine to completion on a fresh :class:`VirtualTimeLoop`."""
    loop = VirtualTimeLoop()
    try:
        asyncio.set_event_loop(loop)
        coro = main() if callable(main) else main
        return loop.run_until_complete(coro)
    finally:
        try:
            _cancel_leftovers(loop)
            loop.run_until_complete(loop.shutdown_asyncgens())
        finally:
            asyncio.set_event_loop(None)
            loop.close()


def _cancel_leftovers(loop: asyncio.AbstractEventLoop) -> None:
    pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for task in pending:
        task.cancel()
    if pending:
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))


class Clock:
    """Scenario-time clock bound to the running event loop.

    ``speed`` compresses every sleep by ``1/speed``; :meth:`now` reports
    scenario time, so timestamps stay comparable across speeds.
    """

    def __init__(self, speed: float = 1.0, *, epoch_ms: int | None = None) -> None:
        if speed <= 0:
            raise ValueError("speed must be positive")
        self.speed = float(speed)
        self._epoch_ms = epoch_ms
        self._loop: asyncio.AbstractEventLoop | None = None
        self._t0 = 0.0

    @property
    def virtual(self) -> bool:
        return isinstance(self._loop, VirtualTimeLoop)

    def bind(self, loop: asyncio.AbstractEventLoop | None = None) -> "Clock":
        loop = loop or asyncio.get_running_loop()
        if self._loop is loop:
            return self
        self._loop = loop
        self._t0 = loop.time()
        if self._epoch_ms is None:
            self._epoch_ms = VIRTUAL_EPOCH_MS if isinstance(loop, VirtualTimeLoop) else int(time.time() * 1000)
        return self

    def _ensure(self) -> asyncio.AbstractEventLoop:
        if self._loop is None:
            self.bind()
        assert self._loop is not None
        return self._loop

    def _try_bind(self) -> bool:
        # reading the time before any loop runs (e.g. wiring an agent) is allowed
        if self._loop is None:
            try:
                self.bind()
            except RuntimeError:
                return False
        return True

    def now(self) -> float:
        """Seconds of scenario time since the clock was bound (0 before)."""
        if not self._try_bind():
            return 0.0
        assert self._loop is not None
        return (self._loop.time() - self._t0) * self.speed

    def now_ms(self) -> int:
        """Epoch milliseconds (UTC) in scenario time."""
        if not self._try_bind():
            if self._epoch_ms is None:
                # pin the epoch so later (bound) readings stay monotone
                self._epoch_ms = int(time.time() * 1000)
            return self._epoch_ms
        assert self._epoch_ms is not None
        return self._epoch_ms + int(round(self.now() * 1000))

    @property
    def epoch_ms(self) -> int:
        self._ensure()
        assert self._epoch_ms is not None
        return self._epoch_ms

    def to_loop_seconds(self, seconds: float) -> float:
        return seconds / self.speed

    async def sleep(self, seconds: float) -> None:
        self._ensure()
        await asyncio.sleep(max(0.0, seconds) / self.speed)

    async def sleep_until(self, t: float) -> None:
        await self.sleep(t - self.now())

    async def wait_for(self, aw: Awaitable[T], timeout: float | None) -> T:
        """``asyncio.wait_for`` with a timeout in scenario seconds."""
        self._ensure()
        return await asyncio.wait_for(aw, None if timeout is None else timeout / self.speed)


def accelerate_clock(factor: float, *, epoch_ms: int | None = None) -> Clock:
    """Clock whose intervals and backoffs elapse ``factor`` times faster."""
    return Clock(speed=factor, epoch_ms=epoch_ms)


def run_with_clock(main: Callable[[], Awaitable[T]], *, virtual: bool) -> T:
    if virtual:
        return run_virtual(main)
    return asyncio.run(main())


def ms_to_iso(ms: int) -> str:
    from datetime import datetime, timezone

    return datetime.fromtimestamp(ms / 1000, tz=timezone.utc).isoformat(timespec="milliseconds")


__all__: list[Any] = [
    "Clock",
    "VirtualTimeLoop",
    "VIRTUAL_EPOCH_MS",
    "accelerate_clock",
    "run_virtual",
    "run_with_clock",
    "ms_to_iso",
]
