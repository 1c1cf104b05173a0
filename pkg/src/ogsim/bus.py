"""Publish-subscribe message transport connecting all station components.

Two backends share one topic/schema contract: this in-process deterministic
bus (used by the simulation and the tests) and an MQTT 3.1.1 bridge to an
off-the-shelf broker (mqtt_bridge) for live operation. Payloads are JSON
objects with lower_snake_case keys; every payload carries the virtual time
`t` and the per-topic sequence number `seq`.

Delivery semantics: synchronous fan-out in subscription order, per-topic
FIFO. Subscriber queues are bounded; at_most_once topics drop the oldest
entry on overflow, at_least_once topics raise a backpressure error.
Retained topics replay their latest value to new subscribers. Command
topics have registered handlers that acknowledge on `<topic>/ack`,
correlated by the command's seq; handlers are deduplicated by seq so an
at_least_once redelivery cannot apply a command twice.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Callable

import jsonschema

from .errors import CommandFailedError, ConfigurationError, SchemaError

AT_MOST_ONCE = "at_most_once"
AT_LEAST_ONCE = "at_least_once"

DEFAULT_QUEUE_LIMIT = 100_000

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}
_NUM_OR_NULL = {"type": ["number", "null"]}


def _schema(properties: dict, required: list[str] | None = None) -> dict:
    props = {"t": _NUM, "seq": _INT, **properties}
    return {
        "type": "object",
        "properties": props,
        "required": ["t", "seq"] + (required if required is not None else list(properties)),
        "additionalProperties": False,
    }


_ACK_SCHEMA = _schema(
    {"corr": _INT, "ok": _BOOL, "detail": _STR, "echo": {"type": "object"}},
    required=["corr", "ok"],
)


@dataclass(frozen=True)
class TopicSpec:
    name: str
    qos: str
    retained: bool
    schema: dict


TOPIC_TABLE: dict[str, TopicSpec] = {}
_VALIDATORS: dict[str, jsonschema.protocols.Validator] = {}


def _register(name: str, qos: str, retained: bool, schema: dict) -> None:
    TOPIC_TABLE[name] = TopicSpec(name=name, qos=qos, retained=retained, schema=schema)
    _VALIDATORS[name] = jsonschema.Draft202012Validator(schema)


_register(
    "ogs/controller/state", AT_LEAST_ONCE, True,
    _schema({"state": _STR, "pass_id": _STR}),
)
_register(
    "ogs/controller/cmd", AT_LEAST_ONCE, False,
    _schema(
        {
            "action": {"enum": ["start_pass", "abort", "set_mode"]},
            "plan": {"type": "object"},
            "mode": _STR,
        },
        required=["action"],
    ),
)
_register(
    "ogs/track/telemetry", AT_MOST_ONCE, False,
    _schema(
        {
            "rms_rad": _NUM,
            "resid_tip_rad": _NUM,
            "resid_tilt_rad": _NUM,
            "fpm_tip_rad": _NUM,
            "fpm_tilt_rad": _NUM,
            "mount_tip_rad": _NUM,
            "mount_tilt_rad": _NUM,
            "lock": _BOOL,
        }
    ),
)
_register(
    "ogs/track/cmd", AT_LEAST_ONCE, False,
    _schema({"action": {"enum": ["set_gains"]}, "kp": _NUM, "ki": _NUM}, required=["action"]),
)
_register(
    "ogs/pol/telemetry", AT_MOST_ONCE, False,
    _schema({"psi_deg": _NUM_OR_NULL, "q1_deg": _NUM, "h_deg": _NUM, "q2_deg": _NUM}),
)
_register(
    "ogs/pol/cmd", AT_LEAST_ONCE, False,
    _schema({"q1_deg": _NUM, "h_deg": _NUM, "q2_deg": _NUM}),
)
_register(
    "ogs/qkd/telemetry", AT_MOST_ONCE, False,
    _schema(
        {
            "sifted_count": _INT,
            "error_count": _INT,
            "qber": _NUM_OR_NULL,
            "background_fraction": _NUM,
        }
    ),
)
_register(
    "ogs/qkd/cmd", AT_LEAST_ONCE, False,
    _schema(
        {
            "action": {"enum": ["set_filter", "set_mode"]},
            "lambda_nm": _NUM,
            "mode": {"enum": ["open_loop", "closed_loop", "off"]},
        },
        required=["action"],
    ),
)
_register(
    "ogs/boba/state", AT_LEAST_ONCE, True,
    _schema({"enabled": _BOOL, "lambda_nm": _NUM, "power_w": _NUM}),
)
_register(
    "ogs/boba/cmd", AT_LEAST_ONCE, False,
    _schema({"enable": _BOOL, "lambda_nm": _NUM, "power_w": _NUM}),
)
_register(
    "ogs/ephemeris/pass", AT_LEAST_ONCE, True,
    _schema(
        {
            "pass_id": _STR,
            "start_t": _NUM,
            "end_t": _NUM,
            "step_s": _NUM,
            "max_elevation_deg": _NUM,
            "orbit_altitude_km": _NUM,
            "n_samples": _INT,
        }
    ),
)
# acknowledge topics for every command topic
for _name in [n for n in list(TOPIC_TABLE) if n.endswith("/cmd")]:
    _register(_name + "/ack", AT_LEAST_ONCE, False, _ACK_SCHEMA)


@dataclass(frozen=True)
class Envelope:
    topic: str
    payload: dict
    t_virtual: float
    seq: int = -1          # stamped by the bus at publish
    qos: str = AT_MOST_ONCE
    retained: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "topic": self.topic,
                "seq": self.seq,
                "t": self.t_virtual,
                "qos": self.qos,
                "retained": self.retained,
                "payload": self.payload,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Envelope":
        d = json.loads(line)
        return cls(
            topic=d["topic"],
            payload=d["payload"],
            t_virtual=d["t"],
            seq=d["seq"],
            qos=d["qos"],
            retained=d["retained"],
        )


class Subscription:
    """Handle yielding matching envelopes in per-topic order."""

    def __init__(self, bus: "InProcessBus", pattern: str, queue_limit: int):
        self.pattern = pattern
        self._bus = bus
        self._queue: deque[Envelope] = deque()
        self._limit = queue_limit
        self.closed = False
        self.dropped = 0

    def matches(self, topic: str) -> bool:
        if self.pattern.endswith("/#"):
            return topic.startswith(self.pattern[:-1]) or topic == self.pattern[:-2]
        return topic == self.pattern

    def _deliver(self, env: Envelope) -> None:
        if self.closed:
            return
        if len(self._queue) >= self._limit:
            if env.qos == AT_LEAST_ONCE:
                raise ConfigurationError(
                    f"backpressure on at_least_once topic {env.topic}"
                )
            self._queue.popleft()
            self.dropped += 1
        self._queue.append(env)

    def poll(self) -> Envelope | None:
        return self._queue.popleft() if self._queue else None

    def drain(self) -> list[Envelope]:
        out = list(self._queue)
        self._queue.clear()
        return out

    def close(self) -> None:
        self.closed = True
        self._bus._drop(self)


def validate_payload(topic: str, payload: dict) -> None:
    validator = _VALIDATORS.get(topic)
    if validator is None:
        raise ConfigurationError(f"unregistered topic: {topic}")
    error = next(validator.iter_errors(payload), None)
    if error is not None:
        raise SchemaError(f"payload for {topic} invalid: {error.message}")


class InProcessBus:
    """Deterministic single-process bus honoring the shared topic table."""

    def __init__(self, queue_limit: int = DEFAULT_QUEUE_LIMIT, record: bool = False):
        self._subs: list[Subscription] = []
        self._seq: dict[str, int] = {}
        self._retained: dict[str, Envelope] = {}
        self._handlers: dict[str, Callable[[dict], dict]] = {}
        self._handled: dict[str, dict[int, dict]] = {}
        self._queue_limit = queue_limit
        self.log: list[Envelope] | None = [] if record else None

    # -- publishing ---------------------------------------------------
    def publish(self, topic: str, payload: dict, t_virtual: float) -> Envelope:
        spec = TOPIC_TABLE.get(topic)
        if spec is None:
            raise ConfigurationError(f"unregistered topic: {topic}")
        if "#" in topic:
            raise ConfigurationError("wildcards are not allowed in publishes")
        seq = self._seq.get(topic, 0)
        body = dict(payload)
        body["t"] = t_virtual
        body["seq"] = seq
        validate_payload(topic, body)
        env = Envelope(
            topic=topic,
            payload=body,
            t_virtual=t_virtual,
            seq=seq,
            qos=spec.qos,
            retained=spec.retained,
        )
        self._seq[topic] = seq + 1
        if spec.retained:
            self._retained[topic] = env
        if self.log is not None:
            self.log.append(env)
        for sub in list(self._subs):
            if sub.matches(topic):
                sub._deliver(env)
        handler = self._handlers.get(topic)
        if handler is not None:
            self._dispatch_command(env, handler)
        return env

    def _dispatch_command(self, env: Envelope, handler: Callable[[dict], dict]) -> None:
        seen = self._handled.setdefault(env.topic, {})
        if env.seq in seen:
            ack_body = seen[env.seq]  # duplicate delivery: identical re-ack
        else:
            try:
                result = handler(dict(env.payload))
                ack_body = {"corr": env.seq, "ok": True, "echo": result or {}}
            except Exception as exc:  # handler errors become nacks
                ack_body = {"corr": env.seq, "ok": False, "detail": str(exc)}
            seen[env.seq] = ack_body
        self.publish(env.topic + "/ack", dict(ack_body), env.t_virtual)

    # -- subscribing ---------------------------------------------------
    def subscribe(self, pattern: str, queue_limit: int | None = None) -> Subscription:
        if pattern.count("#") > 1 or ("#" in pattern and not pattern.endswith("/#")):
            raise ConfigurationError(f"malformed pattern: {pattern}")
        if "#" not in pattern and pattern not in TOPIC_TABLE:
            raise ConfigurationError(f"unregistered topic: {pattern}")
        sub = Subscription(self, pattern, queue_limit or self._queue_limit)
        self._subs.append(sub)
        for topic in sorted(self._retained):
            if sub.matches(topic):
                sub._deliver(self._retained[topic])
        return sub

    def _drop(self, sub: Subscription) -> None:
        if sub in self._subs:
            self._subs.remove(sub)

    # -- commands --------------------------------------------------------
    def register_handler(self, topic: str, handler: Callable[[dict], dict]) -> None:
        spec = TOPIC_TABLE.get(topic)
        if spec is None or not topic.endswith("/cmd"):
            raise ConfigurationError(f"not a command topic: {topic}")
        self._handlers[topic] = handler

    def unregister_handler(self, topic: str) -> None:
        self._handlers.pop(topic, None)

    def redeliver(self, env: Envelope) -> None:
        """Test harness hook: simulate an at_least_once redelivery of an
        already-published command envelope (same seq)."""
        if env.qos != AT_LEAST_ONCE:
            raise ConfigurationError("redelivery only applies to at_least_once")
        handler = self._handlers.get(env.topic)
        if handler is not None:
            self._dispatch_command(env, handler)

    def command_roundtrip(
        self, topic: str, payload: dict, t_virtual: float, timeout_virtual_s: float = 1.0,
        clock=None,
    ) -> dict:
        """Publish a command and return the correlated ack payload.

        With the synchronous in-process bus an ack is immediate when a
        handler is registered; otherwise the virtual clock advances by the
        timeout, the command is retried once (at_least_once), and a
        command-failed error is raised.
        """
        ack_sub = self.subscribe(topic + "/ack")
        try:
            for attempt in range(2):
                env = self.publish(topic, dict(payload), t_virtual)
                while True:
                    ack = ack_sub.poll()
                    if ack is None:
                        break
                    if ack.payload.get("corr") == env.seq:
                        return ack.payload
                if clock is not None:
                    clock.advance(timeout_virtual_s)
                    t_virtual = clock.t
            raise CommandFailedError(f"no ack for {topic} after retry")
        finally:
            ack_sub.close()

    def retained_value(self, topic: str) -> Envelope | None:
        return self._retained.get(topic)


class VirtualClock:
    """Deterministic simulation clock owned by the controller."""

    def __init__(self, t0: float = 0.0):
        self.t = float(t0)

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ConfigurationError("clock cannot run backwards")
        self.t += dt
        return self.t


def write_log_jsonl(envelopes, path) -> None:
    with open(path, "w") as fh:
        for env in envelopes:
            fh.write(env.to_json() + "\n")


def read_log_jsonl(path) -> list[Envelope]:
    with open(path) as fh:
        return [Envelope.from_json(line) for line in fh if line.strip()]
