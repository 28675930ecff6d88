"""Exception hierarchy shared by all cma subsystems."""

from __future__ import annotations


class CMAError(Exception):
    """Base class for every error raised by this package."""


# bus
class InvalidNameError(CMAError, ValueError):
    pass


class MalformedPayloadError(CMAError, ValueError):
    def __init__(self, message: str, *, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


class BusStoppedError(CMAError, RuntimeError):
    pass


class DuplicateSubscriptionError(CMAError, RuntimeError):
    pass


class AdapterError(CMAError):
    """Base for external broker adapter failures."""


class AdapterConnectionRefused(AdapterError, ConnectionError):
    pass


class AdapterProtocolError(AdapterError):
    pass


class AdapterTimeout(AdapterError, TimeoutError):
    pass


# memory
class StorageFullError(CMAError, RuntimeError):
    pass


# gateway
class GatewayError(CMAError):
    retryable = False


class GatewayTimeout(GatewayError, TimeoutError):
    retryable = True


class TransportError(GatewayError):
    retryable = True


class UpstreamStatusError(GatewayError):
    def __init__(self, status: int, message: str = "") -> None:
        super().__init__(f"upstream returned HTTP {status}" + (f": {message}" if message else ""))
        self.status = status

    @property
    def retryable(self) -> bool:  # type: ignore[override]
        return self.status == 429 or self.status >= 500


class UpstreamMalformedError(GatewayError):
    pass


class ScriptParseError(CMAError, ValueError):
    def __init__(self, message: str, *, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


# runtime
class DuplicateModuleError(CMAError, ValueError):
    pass


class UnknownModuleError(CMAError, KeyError):
    pass


# harness / cli
class ScenarioParseError(CMAError, ValueError):
    def __init__(self, message: str, *, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ConfigError(CMAError, ValueError):
    """Invalid agent definition; ``diagnostics`` lists every problem found."""

    def __init__(self, message: str, diagnostics: list | None = None) -> None:
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])
