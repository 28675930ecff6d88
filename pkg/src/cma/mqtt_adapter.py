"""Bridge between the in-process bus and an external MQTT 3.1.1 broker.

Local publishes are mirrored to the broker at QoS 0 using the canonical
:func:`cma.bus.encode` payload; anything arriving on
``cma/<agent_id>/module/+/inbox`` is decoded and injected into the local bus.
The adapter runs on paho's network thread. Its failures are logged and
recorded, never raised into the bus.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import threading
from collections import deque

import paho.mqtt.client as mqtt

from .bus import TOPIC_PREFIX, Bus, Envelope, check_name, decode
from .errors import (
    AdapterConnectionRefused,
    AdapterError,
    AdapterProtocolError,
    AdapterTimeout,
    MalformedPayloadError,
)

logger = logging.getLogger(__name__)

_ECHO_MEMORY = 4096


def parse_address(address: str, default_port: int = 1883) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        return address, default_port
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ValueError(f"bad broker address {address!r}") from None


class MqttAdapter:
    def __init__(
        self,
        bus: Bus,
        host: str,
        port: int = 1883,
        agent_id: str | None = None,
        *,
        timeout: float = 5.0,
        keepalive: int = 30,
        client_id: str | None = None,
    ) -> None:
        self.bus = bus
        self.host = host
        self.port = port
        self.agent_id = check_name(agent_id or bus.agent_id, "agent_id")
        self.timeout = timeout
        self.keepalive = keepalive
        self.pattern = f"{TOPIC_PREFIX}/{self.agent_id}/module/+/inbox"
        self.client_id = client_id or f"cma-{self.agent_id}-{bus.new_msg_id()[:8]}"

        self.connected = False
        self.errors: list[str] = []
        self.counters = {"mirrored": 0, "injected": 0, "malformed": 0, "echoes": 0, "unsent": 0}

        self._client: mqtt.Client | None = None
        self._connack = threading.Event()
        self._connack_rc: object = None
        self._early_disconnect = False
        self._loop: asyncio.AbstractEventLoop | None = None
        self._sent_ids: deque[str] = deque(maxlen=_ECHO_MEMORY)
        self._sent_set: set[str] = set()
        self._lock = threading.Lock()

    # lifecycle -----------------------------------------------------------
    def connect(self) -> "MqttAdapter":
        try:
            self._loop = asyncio.get_running_loop()
        except RuntimeError:
            self._loop = None

        client = mqtt.Client(
            mqtt.CallbackAPIVersion.VERSION2,
            client_id=self.client_id,
            protocol=mqtt.MQTTv311,
            reconnect_on_failure=True,
        )
        client.connect_timeout = self.timeout
        client.on_connect = self._on_connect
        client.on_disconnect = self._on_disconnect
        client.on_message = self._on_message
        self._client = client

        try:
            client.connect(self.host, self.port, keepalive=self.keepalive)
        except ConnectionRefusedError as exc:
            raise AdapterConnectionRefused(f"broker {self.host}:{self.port} refused connection: {exc}") from None
        except (socket.timeout, TimeoutError) as exc:
            raise AdapterTimeout(f"connecting to {self.host}:{self.port} timed out: {exc}") from None
        except OSError as exc:
            raise AdapterError(f"cannot reach broker {self.host}:{self.port}: {exc}") from None

        client.loop_start()
        if not self._connack.wait(self.timeout):
            self._teardown()
            raise AdapterTimeout(f"no CONNACK from {self.host}:{self.port} within {self.timeout}s")
        if self._early_disconnect or self._connack_rc is None or _is_failure(self._connack_rc):
            rc = self._connack_rc
            self._teardown()
            raise AdapterProtocolError(f"broker {self.host}:{self.port} rejected session: {rc}")

        self.bus.add_tap(self._mirror)
        logger.info("mqtt adapter connected to %s:%d (%s)", self.host, self.port, self.pattern)
        return self

    def close(self) -> None:
        self.bus.remove_tap(self._mirror)
        self._teardown()

    def drop(self) -> None:
        """Simulate a network loss: sever the socket but keep the bus running."""
        self.bus.remove_tap(self._mirror)
        self._teardown()
        self._record_error("adapter dropped")

    def _teardown(self) -> None:
        client, self._client = self._client, None
        self.connected = False
        if client is None:
            return
        try:
            client.disconnect()
        except Exception:
            pass
        try:
            client.loop_stop()
        except Exception:
            pass

    # paho callbacks (network thread) -------------------------------------
    def _on_connect(self, client, userdata, flags, reason_code, properties=None) -> None:
        self._connack_rc = reason_code
        if not _is_failure(reason_code):
            self.connected = True
            client.subscribe(self.pattern, qos=0)
        self._connack.set()

    def _on_disconnect(self, client, userdata, flags, reason_code, properties=None) -> None:
        was = self.connected
        self.connected = False
        if not self._connack.is_set():
            self._early_disconnect = True
            self._connack.set()
        elif was:
            self._record_error(f"disconnected from broker: {reason_code}")

    def _on_message(self, client, userdata, msg) -> None:
        try:
            env = decode(msg.payload)
            if env.topic != msg.topic:
                raise MalformedPayloadError(f"envelope addressed to {env.topic} arrived on {msg.topic}")
        except MalformedPayloadError as exc:
            with self._lock:
                self.counters["malformed"] += 1
            logger.warning("malformed payload on %s: %s", msg.topic, exc)
            return
        with self._lock:
            if env.msg_id in self._sent_set:
                self.counters["echoes"] += 1
                return
            self.counters["injected"] += 1
        self._deliver(env)

    def _deliver(self, env: Envelope) -> None:
        loop = self._loop
        try:
            if loop is not None and not loop.is_closed():
                loop.call_soon_threadsafe(self._safe_inject, env)
            else:
                self._safe_inject(env)
        except RuntimeError:
            self._safe_inject(env)

    def _safe_inject(self, env: Envelope) -> None:
        try:
            self.bus.inject(env)
        except Exception as exc:
            self._record_error(f"inject failed: {exc}")

    # bus tap (caller's thread) -------------------------------------------
    def _mirror(self, env: Envelope, payload: bytes) -> None:
        client = self._client
        if client is None or not self.connected:
            with self._lock:
                self.counters["unsent"] += 1
            return
        with self._lock:
            if len(self._sent_ids) == self._sent_ids.maxlen:
                self._sent_set.discard(self._sent_ids[0])
            self._sent_ids.append(env.msg_id)
            self._sent_set.add(env.msg_id)
        info = client.publish(env.topic, payload, qos=0)
        with self._lock:
            if info.rc == mqtt.MQTT_ERR_SUCCESS:
                self.counters["mirrored"] += 1
            else:
                self.counters["unsent"] += 1

    def _record_error(self, message: str) -> None:
        self.errors.append(message)
        logger.warning("mqtt adapter: %s", message)


def _is_failure(rc: object) -> bool:
    failure = getattr(rc, "is_failure", None)
    if failure is not None:
        return bool(failure)
    return rc != 0


def external_adapter_connect(bus: Bus, broker_address: str, agent_id: str | None = None, *, timeout: float = 5.0) -> MqttAdapter:
    host, port = parse_address(broker_address)
    return MqttAdapter(bus, host, port, agent_id, timeout=timeout).connect()
