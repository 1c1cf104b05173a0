import pytest

from ogsim.bus import (
    AT_LEAST_ONCE,
    AT_MOST_ONCE,
    Envelope,
    InProcessBus,
    TOPIC_TABLE,
    VirtualClock,
    read_log_jsonl,
    write_log_jsonl,
)
from ogsim.errors import CommandFailedError, ConfigurationError, SchemaError


def test_topic_table_covers_contract():
    expected = {
        "ogs/controller/state", "ogs/controller/cmd",
        "ogs/track/telemetry", "ogs/track/cmd",
        "ogs/pol/telemetry", "ogs/pol/cmd",
        "ogs/qkd/telemetry", "ogs/qkd/cmd",
        "ogs/boba/state", "ogs/boba/cmd",
        "ogs/ephemeris/pass",
    }
    assert expected <= set(TOPIC_TABLE)
    for name in expected:
        spec = TOPIC_TABLE[name]
        if name.endswith("telemetry"):
            assert spec.qos == AT_MOST_ONCE
        else:
            assert spec.qos == AT_LEAST_ONCE
    assert TOPIC_TABLE["ogs/controller/state"].retained
    assert TOPIC_TABLE["ogs/boba/state"].retained
    assert TOPIC_TABLE["ogs/ephemeris/pass"].retained
    for name in expected:
        if name.endswith("/cmd"):
            assert name + "/ack" in TOPIC_TABLE


def test_retained_delivered_to_late_subscriber():
    bus = InProcessBus()
    bus.publish("ogs/controller/state", {"state": "TRACK", "pass_id": "p1"}, 5.0)
    sub = bus.subscribe("ogs/controller/state")
    env = sub.poll()
    assert env is not None and env.payload["state"] == "TRACK"
    assert env.retained


def test_per_topic_order_and_seq():
    bus = InProcessBus()
    sub = bus.subscribe("ogs/track/telemetry")
    payload = {
        "rms_rad": 1e-6, "resid_tip_rad": 0.0, "resid_tilt_rad": 0.0,
        "fpm_tip_rad": 0.0, "fpm_tilt_rad": 0.0,
        "mount_tip_rad": 0.0, "mount_tilt_rad": 0.0, "lock": True,
    }
    for i in range(5):
        bus.publish("ogs/track/telemetry", dict(payload), float(i))
    seqs = [sub.poll().seq for _ in range(5)]
    assert seqs == [0, 1, 2, 3, 4]
    assert sub.poll() is None


def test_schema_violation_rejected_before_delivery():
    bus = InProcessBus()
    sub = bus.subscribe("ogs/qkd/telemetry")
    with pytest.raises(SchemaError):
        bus.publish("ogs/qkd/telemetry", {"sifted_count": "many"}, 0.0)
    with pytest.raises(SchemaError):
        bus.publish(
            "ogs/qkd/telemetry",
            {"sifted_count": 1, "error_count": 0, "qber": 0.0,
             "background_fraction": 0.0, "bogus": 1},
            0.0,
        )
    assert sub.poll() is None


def test_unregistered_topic_rejected():
    bus = InProcessBus()
    with pytest.raises(ConfigurationError):
        bus.publish("ogs/nonexistent", {}, 0.0)
    with pytest.raises(ConfigurationError):
        bus.subscribe("ogs/nonexistent")


def test_wildcard_subscription():
    bus = InProcessBus()
    sub = bus.subscribe("ogs/qkd/#")
    bus.publish(
        "ogs/qkd/telemetry",
        {"sifted_count": 1, "error_count": 0, "qber": 0.0, "background_fraction": 0.0},
        0.0,
    )
    bus.publish("ogs/qkd/cmd", {"action": "set_mode", "mode": "off"}, 0.0)
    topics = {env.topic for env in sub.drain()}
    assert topics == {"ogs/qkd/telemetry", "ogs/qkd/cmd"}


def test_malformed_pattern_rejected():
    bus = InProcessBus()
    with pytest.raises(ConfigurationError):
        bus.subscribe("ogs/#/cmd")
    with pytest.raises(ConfigurationError):
        bus.publish("ogs/qkd/#", {}, 0.0)


def test_closed_subscription_receives_nothing():
    bus = InProcessBus()
    sub = bus.subscribe("ogs/pol/cmd")
    sub.close()
    bus.publish("ogs/pol/cmd", {"q1_deg": 0.0, "h_deg": 0.0, "q2_deg": 0.0}, 0.0)
    assert sub.poll() is None


def test_command_roundtrip_ack():
    bus = InProcessBus()
    applied = []

    def handler(payload):
        applied.append(payload["kp"])
        return {"kp": payload["kp"], "ki": payload["ki"]}

    bus.register_handler("ogs/track/cmd", handler)
    ack = bus.command_roundtrip(
        "ogs/track/cmd", {"action": "set_gains", "kp": 0.7, "ki": 40.0}, 1.0
    )
    assert ack["ok"] is True
    assert ack["echo"] == {"kp": 0.7, "ki": 40.0}
    assert applied == [0.7]


def test_command_without_handler_times_out():
    bus = InProcessBus()
    clock = VirtualClock(0.0)
    with pytest.raises(CommandFailedError):
        bus.command_roundtrip(
            "ogs/boba/cmd", {"enable": False, "lambda_nm": 0.0, "power_w": 0.0},
            0.0, timeout_virtual_s=2.0, clock=clock,
        )
    assert clock.t == 4.0  # two timeout waits: original + retry


def test_duplicate_delivery_idempotent():
    bus = InProcessBus()
    calls = []

    def handler(payload):
        calls.append(payload["mode"])
        return {"mode": payload["mode"]}

    bus.register_handler("ogs/qkd/cmd", handler)
    acks = bus.subscribe("ogs/qkd/cmd/ack")
    env = bus.publish("ogs/qkd/cmd", {"action": "set_mode", "mode": "off"}, 0.0)
    bus.redeliver(env)  # at_least_once duplicate with identical seq
    assert calls == ["off"]  # exactly one state change
    a1, a2 = acks.poll(), acks.poll()
    assert a1.payload["corr"] == a2.payload["corr"] == env.seq
    assert {k: v for k, v in a1.payload.items() if k != "seq"} == {
        k: v for k, v in a2.payload.items() if k != "seq"
    }


def test_handler_error_becomes_nack():
    bus = InProcessBus()

    def handler(payload):
        raise ValueError("bad command")

    bus.register_handler("ogs/qkd/cmd", handler)
    ack = bus.command_roundtrip("ogs/qkd/cmd", {"action": "set_mode", "mode": "off"}, 0.0)
    assert ack["ok"] is False
    assert "bad command" in ack["detail"]


def test_at_most_once_overflow_drops_oldest():
    bus = InProcessBus()
    sub = bus.subscribe("ogs/track/telemetry", queue_limit=3)
    payload = {
        "rms_rad": 0.0, "resid_tip_rad": 0.0, "resid_tilt_rad": 0.0,
        "fpm_tip_rad": 0.0, "fpm_tilt_rad": 0.0,
        "mount_tip_rad": 0.0, "mount_tilt_rad": 0.0, "lock": False,
    }
    for i in range(5):
        bus.publish("ogs/track/telemetry", dict(payload), float(i))
    received = sub.drain()
    assert [e.seq for e in received] == [2, 3, 4]
    assert sub.dropped == 2


def test_at_least_once_overflow_errors():
    bus = InProcessBus()
    bus.subscribe("ogs/pol/cmd", queue_limit=1)
    bus.publish("ogs/pol/cmd", {"q1_deg": 0.0, "h_deg": 0.0, "q2_deg": 0.0}, 0.0)
    with pytest.raises(ConfigurationError):
        bus.publish("ogs/pol/cmd", {"q1_deg": 1.0, "h_deg": 0.0, "q2_deg": 0.0}, 1.0)


def test_log_jsonl_roundtrip(tmp_path):
    bus = InProcessBus(record=True)
    bus.publish("ogs/controller/state", {"state": "IDLE", "pass_id": "p"}, 0.0)
    bus.publish("ogs/boba/state", {"enabled": True, "lambda_nm": 1550.0, "power_w": 5.0}, 1.0)
    path = tmp_path / "log.jsonl"
    write_log_jsonl(bus.log, path)
    back = read_log_jsonl(path)
    assert back == bus.log
    assert all(isinstance(e, Envelope) for e in back)
