"""Chat-completion gateway: the one place modules reach the language model.

Three interchangeable backends sit behind :meth:`Gateway.complete`:

* ``ScriptedBackend``: ordered match rules loaded from JSONL, with the
  echo digest as fallback. Deterministic; used by tests and scenarios.
* ``EchoBackend``: always answers ``ECHO(<len>):<last user message>``.
* ``HttpBackend``: the de-facto ``/chat/completions`` JSON wire shape.

The gateway adds a FIFO concurrency limiter, a deadline and exponential
backoff with full jitter for retryable failures.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Awaitable, Protocol, Sequence

import httpx

from .errors import (
    GatewayError,
    GatewayTimeout,
    ScriptParseError,
    TransportError,
    UpstreamMalformedError,
    UpstreamStatusError,
)

if TYPE_CHECKING:
    from .clock import Clock

logger = logging.getLogger(__name__)

ROLES = ("user", "assistant")


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    messages: tuple[tuple[str, str], ...] = ()
    model_id: str = "default"
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self) -> None:
        msgs = tuple((str(role), str(text)) for role, text in self.messages)
        object.__setattr__(self, "messages", msgs)
        for role, _ in msgs:
            if role not in ROLES:
                raise ValueError(f"message role must be one of {ROLES}, got {role!r}")
        if not msgs and not self.system_prompt:
            raise ValueError("a chat request needs a system prompt or at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def simple(cls, system_prompt: str, user_text: str, **kw: Any) -> "ChatRequest":
        return cls(system_prompt, (("user", user_text),), **kw)

    @property
    def last_user_message(self) -> str:
        for role, text in reversed(self.messages):
            if role == "user":
                return text
        return ""

    @property
    def match_text(self) -> str:
        return f"{self.system_prompt}\n{self.last_user_message}"


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend: str
    latency: float  # seconds
    attempts: int


@dataclass
class ScriptRule:
    match: str
    response: str
    regex: bool = False
    once: bool = False
    _pattern: re.Pattern | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.regex:
            self._pattern = re.compile(self.match, re.DOTALL)

    def apply(self, text: str) -> str | None:
        if self._pattern is not None:
            m = self._pattern.search(text)
            return m.expand(self.response) if m else None
        return self.response if self.match in text else None


def echo_digest(request: ChatRequest) -> str:
    msg = request.last_user_message
    return f"ECHO({len(msg)}):{msg}"


def parse_rule(obj: object, line: int) -> ScriptRule:
    if not isinstance(obj, dict):
        raise ScriptParseError("rule must be a JSON object", line=line)
    for key in ("match", "response"):
        if not isinstance(obj.get(key), str):
            raise ScriptParseError(f"rule needs string field {key!r}", line=line)
    for key in ("regex", "once"):
        if key in obj and not isinstance(obj[key], bool):
            raise ScriptParseError(f"field {key!r} must be a boolean", line=line)
    try:
        return ScriptRule(obj["match"], obj["response"], regex=obj.get("regex", False), once=obj.get("once", False))
    except re.error as exc:
        raise ScriptParseError(f"bad regex: {exc}", line=line) from None


def parse_script(text: str) -> list[ScriptRule]:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScriptParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
        rules.append(parse_rule(obj, lineno))
    return rules


def load_script(path: str | os.PathLike) -> list[ScriptRule]:
    return parse_script(Path(path).read_text(encoding="utf-8"))


class Backend(Protocol):
    name: str

    async def send(self, request: ChatRequest) -> str: ...


class EchoBackend:
    name = "echo"

    async def send(self, request: ChatRequest) -> str:
        return echo_digest(request)


class ScriptedBackend:
    """First matching rule wins; ``once`` rules are consumed on use."""

    name = "scripted"

    def __init__(self, rules: Sequence[ScriptRule] = ()) -> None:
        self.rules = list(rules)
        self._lock = threading.Lock()
        self.calls: list[ChatRequest] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedBackend":
        return cls(load_script(path))

    async def send(self, request: ChatRequest) -> str:
        text = request.match_text
        with self._lock:
            self.calls.append(request)
            for i, rule in enumerate(self.rules):
                out = rule.apply(text)
                if out is not None:
                    if rule.once:
                        del self.rules[i]
                    return out
        return echo_digest(request)


def http_backend_encode(request: ChatRequest) -> dict:
    messages = []
    if request.system_prompt:
        messages.append({"role": "system", "content": request.system_prompt})
    messages.extend({"role": role, "content": text} for role, text in request.messages)
    return {
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }


def http_backend_decode(payload: bytes | str) -> str:
    try:
        obj = json.loads(payload)
        choices = obj["choices"]
    except (ValueError, KeyError, TypeError) as exc:
        raise UpstreamMalformedError(f"unreadable completion payload: {exc}") from None
    if not isinstance(choices, list) or not choices:
        raise UpstreamMalformedError("completion payload has no choices")
    try:
        content = choices[0]["message"]["content"]
    except (KeyError, TypeError, IndexError) as exc:
        raise UpstreamMalformedError(f"choice has no message content: {exc}") from None
    if not isinstance(content, str):
        raise UpstreamMalformedError("message content is not text")
    return content


class HttpBackend:
    name = "http"

    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        *,
        transport: httpx.AsyncBaseTransport | None = None,
        request_timeout: float = 30.0,
    ) -> None:
        self.url = url
        self.api_key = api_key
        self._transport = transport
        self.request_timeout = request_timeout
        self._client: httpx.AsyncClient | None = None

    def _get_client(self) -> httpx.AsyncClient:
        if self._client is None:
            headers = {"Content-Type": "application/json"}
            if self.api_key:
                headers["Authorization"] = f"Bearer {self.api_key}"
            self._client = httpx.AsyncClient(transport=self._transport, headers=headers, timeout=self.request_timeout)
        return self._client

    async def send(self, request: ChatRequest) -> str:
        body = json.dumps(http_backend_encode(request)).encode("utf-8")
        try:
            resp = await self._get_client().post(self.url, content=body)
        except httpx.TimeoutException as exc:
            raise GatewayTimeout(f"request timed out: {exc}") from None
        except httpx.HTTPError as exc:
            raise TransportError(f"transport failure: {exc}") from None
        if resp.status_code >= 400:
            raise UpstreamStatusError(resp.status_code, resp.text[:200])
        return http_backend_decode(resp.content)

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.aclose()
            self._client = None


@dataclass(frozen=True)
class RetryPolicy:
    base: float = 0.5
    factor: float = 2.0
    max_retries: int = 3
    deadline: float = 30.0

    def ceiling(self, retry: int) -> float:
        """Upper bound of the jittered sleep before retry number ``retry`` (1-based)."""
        return self.base * self.factor ** (retry - 1)


class Gateway:
    """Single chat-completion entry point shared by every module.

    Without a ``clock`` the gateway uses asyncio and the monotonic clock; the
    runtime passes its :class:`~cma.clock.Clock` so deadlines and backoff
    honour virtual and accelerated time.
    """

    def __init__(
        self,
        backend: Backend,
        *,
        retry: RetryPolicy | None = None,
        max_concurrency: int = 8,
        rng: random.Random | None = None,
        clock: "Clock | None" = None,
    ) -> None:
        self.backend = backend
        self.retry = retry or RetryPolicy()
        self.max_concurrency = max_concurrency
        self._rng = rng or random.Random()
        self.clock = clock
        self._limiter: asyncio.Semaphore | None = None
        self._limiter_loop: asyncio.AbstractEventLoop | None = None
        self.calls = 0

    def _semaphore(self) -> asyncio.Semaphore:
        loop = asyncio.get_running_loop()
        if self._limiter is None or self._limiter_loop is not loop:
            self._limiter = asyncio.Semaphore(self.max_concurrency)
            self._limiter_loop = loop
        return self._limiter

    @property
    def in_flight(self) -> int:
        if self._limiter is None:
            return 0
        return self.max_concurrency - self._limiter._value  # noqa: SLF001

    def _now(self) -> float:
        return self.clock.now() if self.clock is not None else time.monotonic()

    async def _sleep(self, seconds: float) -> None:
        if self.clock is not None:
            await self.clock.sleep(seconds)
        else:
            await asyncio.sleep(seconds)

    async def _wait(self, aw: Awaitable[str], timeout: float) -> str:
        if self.clock is not None:
            return await self.clock.wait_for(aw, timeout)
        return await asyncio.wait_for(aw, timeout)

    async def complete(self, request: ChatRequest) -> ChatResponse:
        async with self._semaphore():
            return await self._complete(request)

    async def _complete(self, request: ChatRequest) -> ChatResponse:
        policy = self.retry
        start = self._now()
        attempts = 0
        while True:
            attempts += 1
            self.calls += 1
            remaining = policy.deadline - (self._now() - start)
            if remaining <= 0:
                raise GatewayTimeout(f"deadline of {policy.deadline}s exhausted after {attempts - 1} attempt(s)")
            try:
                text = await self._wait(self.backend.send(request), remaining)
                return ChatResponse(text, self.backend.name, self._now() - start, attempts)
            except asyncio.TimeoutError:
                err: GatewayError = GatewayTimeout(f"deadline of {policy.deadline}s exceeded")
            except GatewayError as exc:
                err = exc
            if not err.retryable or attempts > policy.max_retries:
                raise err
            delay = self._rng.uniform(0.0, policy.ceiling(attempts))
            if self._now() - start + delay >= policy.deadline:
                raise err
            logger.info("gateway attempt %d failed (%s); retrying in %.3fs", attempts, err, delay)
            await self._sleep(delay)


def build_backend(config: dict, base_dir: str | os.PathLike | None = None) -> Backend:
    """Backend from an agent definition's ``gateway`` block."""
    kind = config.get("backend", "scripted")
    if kind == "echo":
        return EchoBackend()
    if kind == "scripted":
        rules_path = config.get("rules")
        if not rules_path:
            return ScriptedBackend()
        p = Path(rules_path)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        return ScriptedBackend.from_file(p)
    if kind == "http":
        key = os.environ.get(config.get("api_key_env", "CMA_API_KEY"))
        return HttpBackend(config["url"], key, request_timeout=float(config.get("timeout_s", 30.0)))
    raise ValueError(f"unknown gateway backend {kind!r}")
