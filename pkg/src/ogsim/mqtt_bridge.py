"""Bridge between the in-process bus and an external MQTT 3.1.1 broker.

The bridge mirrors the shared topic table both ways: envelopes published on
the in-process bus are forwarded to the broker (telemetry at QoS 0, commands
and state at QoS 1, retained flag preserved), and broker messages under
`ogs/#` are injected back onto the in-process bus, which is how an operator
console steers a run. Per-topic sequence tracking stops forwarded messages
from echoing back around the loop.

The broker URL comes from the OGS_BROKER_URL environment variable or an
explicit argument, e.g. mqtt://localhost:1883.
"""

from __future__ import annotations

import json
import os
import socket
import threading
import time
from urllib.parse import urlparse

from . import mqtt_codec as mc
from .bus import AT_LEAST_ONCE, TOPIC_TABLE, InProcessBus
from .errors import ConfigurationError

ENV_BROKER_URL = "OGS_BROKER_URL"
DEFAULT_PORT = 1883


def parse_broker_url(url: str | None = None) -> tuple[str, int]:
    url = url or os.environ.get(ENV_BROKER_URL)
    if not url:
        raise ConfigurationError(f"no broker URL; set {ENV_BROKER_URL} or pass --broker")
    parsed = urlparse(url if "//" in url else f"mqtt://{url}")
    if parsed.scheme not in ("mqtt", "tcp"):
        raise ConfigurationError(f"unsupported broker scheme: {parsed.scheme}")
    if not parsed.hostname:
        raise ConfigurationError(f"broker URL missing host: {url}")
    return parsed.hostname, parsed.port or DEFAULT_PORT


class MqttClient:
    """Small blocking MQTT 3.1.1 client (QoS 0/1, no persistence)."""

    def __init__(self, host: str, port: int, client_id: str, keepalive_s: int = 30):
        self._sock = socket.create_connection((host, port), timeout=10.0)
        self._parser = mc.StreamParser()
        self._write_lock = threading.Lock()
        self._next_packet_id = 1
        self._connected = threading.Event()
        self._pending_acks: set[int] = set()
        self.on_message = None  # callable(mc.PublishMessage)
        self._alive = True
        self._send(mc.encode_connect(client_id, keepalive_s))
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        if not self._connected.wait(timeout=10.0):
            raise ConfigurationError("broker did not acknowledge the connection")

    def _send(self, data: bytes) -> None:
        with self._write_lock:
            self._sock.sendall(data)

    def _read_loop(self) -> None:
        while self._alive:
            try:
                data = self._sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            for pkt in self._parser.feed(data):
                self._handle(pkt)

    def _handle(self, pkt: mc.Packet) -> None:
        if pkt.ptype == mc.CONNACK:
            if pkt.body[1] != 0:
                raise ConfigurationError(f"broker refused connection: {pkt.body[1]}")
            self._connected.set()
        elif pkt.ptype == mc.PUBLISH:
            msg = mc.parse_publish(pkt)
            if msg.qos == 1 and msg.packet_id is not None:
                self._send(mc.encode_puback(msg.packet_id))
            if self.on_message:
                self.on_message(msg)
        elif pkt.ptype == mc.PUBACK:
            pid = int.from_bytes(pkt.body[:2], "big")
            self._pending_acks.discard(pid)
        elif pkt.ptype == mc.PINGRESP:
            pass

    def publish(self, topic: str, payload: bytes, qos: int = 0, retain: bool = False) -> None:
        pid = None
        if qos > 0:
            pid = self._next_packet_id
            self._next_packet_id = self._next_packet_id % 65535 + 1
            self._pending_acks.add(pid)
        self._send(mc.encode_publish(topic, payload, qos=qos, retain=retain, packet_id=pid))

    def subscribe(self, topic_filter: str, qos: int = 1) -> None:
        pid = self._next_packet_id
        self._next_packet_id = self._next_packet_id % 65535 + 1
        self._send(mc.encode_subscribe(pid, [(topic_filter, qos)]))

    def ping(self) -> None:
        self._send(mc.encode_pingreq())

    def close(self) -> None:
        self._alive = False
        try:
            self._send(mc.encode_disconnect())
            self._sock.close()
        except OSError:
            pass


class BusBridge:
    """Two-way forwarding between an InProcessBus and a broker."""

    def __init__(self, local_bus: InProcessBus, broker_url: str | None = None,
                 client_id: str = "ogs-bridge"):
        host, port = parse_broker_url(broker_url)
        self._bus = local_bus
        self._client = MqttClient(host, port, client_id)
        self._sub = local_bus.subscribe("ogs/#")
        self._forwarded: dict[str, int] = {}   # topic -> last seq sent out
        self._lock = threading.Lock()          # guards _forwarded vs injected publishes
        self._client.on_message = self._from_broker
        self._client.subscribe("ogs/#", qos=1)
        self._pump = threading.Thread(target=self._pump_loop, daemon=True)
        self._alive = True
        self._pump.start()

    def _pump_loop(self) -> None:
        while self._alive:
            with self._lock:
                env = self._sub.poll()
                if env is not None:
                    if self._forwarded.get(env.topic) == env.seq:
                        continue
                    self._forwarded[env.topic] = env.seq
            if env is None:
                time.sleep(0.005)
                continue
            self._client.publish(
                env.topic,
                json.dumps(env.payload, sort_keys=True).encode(),
                qos=1 if env.qos == AT_LEAST_ONCE else 0,
                retain=env.retained,
            )

    def _from_broker(self, msg: mc.PublishMessage) -> None:
        if msg.topic not in TOPIC_TABLE:
            return
        try:
            payload = json.loads(msg.payload.decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            return
        with self._lock:
            seq = payload.get("seq")
            if isinstance(seq, int) and self._forwarded.get(msg.topic) == seq:
                return  # our own message echoed back
            body = {k: v for k, v in payload.items() if k not in ("t", "seq")}
            t = payload.get("t", 0.0)
            env = self._bus.publish(msg.topic, body, t)
            # recorded before the pump can poll it, so it will not bounce back
            self._forwarded[env.topic] = env.seq

    def flush(self, timeout_s: float = 1.0) -> None:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if not self._sub._queue and not self._client._pending_acks:
                return
            time.sleep(0.005)

    def close(self) -> None:
        self._alive = False
        self._pump.join(timeout=1.0)
        self._sub.close()
        self._client.close()
