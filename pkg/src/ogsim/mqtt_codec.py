"""Minimal MQTT 3.1.1 packet codec.

Covers the packet subset the station needs to talk to an off-the-shelf
broker: CONNECT/CONNACK, PUBLISH (QoS 0/1) with retain, PUBACK,
SUBSCRIBE/SUBACK, UNSUBSCRIBE/UNSUBACK, PINGREQ/PINGRESP, DISCONNECT.
Both the broker-facing bridge and the dev broker parse from a running byte
buffer, so packets split across TCP segments or WebSocket frames reassemble
transparently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

CONNECT = 1
CONNACK = 2
PUBLISH = 3
PUBACK = 4
SUBSCRIBE = 8
SUBACK = 9
UNSUBSCRIBE = 10
UNSUBACK = 11
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14


class MqttProtocolError(Exception):
    pass


def _encode_remaining_length(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _utf8(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack(">H", len(b)) + b


@dataclass
class Packet:
    ptype: int
    flags: int
    body: bytes


def encode_connect(client_id: str, keepalive_s: int = 60, clean_session: bool = True) -> bytes:
    flags = 0x02 if clean_session else 0x00
    body = _utf8("MQTT") + bytes([4, flags]) + struct.pack(">H", keepalive_s) + _utf8(client_id)
    return bytes([CONNECT << 4]) + _encode_remaining_length(len(body)) + body


def encode_connack(session_present: bool = False, return_code: int = 0) -> bytes:
    return bytes([CONNACK << 4, 2, 1 if session_present else 0, return_code])


def encode_publish(
    topic: str, payload: bytes, qos: int = 0, retain: bool = False,
    packet_id: int | None = None, dup: bool = False,
) -> bytes:
    flags = (0x08 if dup else 0) | (qos << 1) | (0x01 if retain else 0)
    body = _utf8(topic)
    if qos > 0:
        if packet_id is None:
            raise MqttProtocolError("QoS > 0 publish needs a packet id")
        body += struct.pack(">H", packet_id)
    body += payload
    return bytes([(PUBLISH << 4) | flags]) + _encode_remaining_length(len(body)) + body


def encode_puback(packet_id: int) -> bytes:
    return bytes([PUBACK << 4, 2]) + struct.pack(">H", packet_id)


def encode_subscribe(packet_id: int, filters: list[tuple[str, int]]) -> bytes:
    body = struct.pack(">H", packet_id)
    for topic, qos in filters:
        body += _utf8(topic) + bytes([qos])
    return bytes([(SUBSCRIBE << 4) | 0x02]) + _encode_remaining_length(len(body)) + body


def encode_suback(packet_id: int, return_codes: list[int]) -> bytes:
    body = struct.pack(">H", packet_id) + bytes(return_codes)
    return bytes([SUBACK << 4]) + _encode_remaining_length(len(body)) + body


def encode_unsuback(packet_id: int) -> bytes:
    return bytes([UNSUBACK << 4, 2]) + struct.pack(">H", packet_id)


def encode_pingreq() -> bytes:
    return bytes([PINGREQ << 4, 0])


def encode_pingresp() -> bytes:
    return bytes([PINGRESP << 4, 0])


def encode_disconnect() -> bytes:
    return bytes([DISCONNECT << 4, 0])


@dataclass
class StreamParser:
    """Incremental MQTT packet parser over a byte buffer."""

    buffer: bytearray = field(default_factory=bytearray)

    def feed(self, data: bytes) -> list[Packet]:
        self.buffer.extend(data)
        packets = []
        while True:
            pkt = self._try_parse()
            if pkt is None:
                return packets
            packets.append(pkt)

    def _try_parse(self) -> Packet | None:
        buf = self.buffer
        if len(buf) < 2:
            return None
        # remaining-length varint
        length = 0
        multiplier = 1
        idx = 1
        while True:
            if idx >= len(buf):
                return None
            byte = buf[idx]
            length += (byte & 0x7F) * multiplier
            idx += 1
            if not byte & 0x80:
                break
            multiplier *= 128
            if multiplier > 128**3:
                raise MqttProtocolError("remaining length overflow")
        if len(buf) < idx + length:
            return None
        header = buf[0]
        body = bytes(buf[idx:idx + length])
        del buf[:idx + length]
        return Packet(ptype=header >> 4, flags=header & 0x0F, body=body)


def parse_utf8(body: bytes, offset: int) -> tuple[str, int]:
    if offset + 2 > len(body):
        raise MqttProtocolError("truncated string")
    (n,) = struct.unpack_from(">H", body, offset)
    end = offset + 2 + n
    if end > len(body):
        raise MqttProtocolError("truncated string body")
    return body[offset + 2:end].decode("utf-8"), end


@dataclass(frozen=True)
class PublishMessage:
    topic: str
    payload: bytes
    qos: int
    retain: bool
    packet_id: int | None
    dup: bool


def parse_publish(pkt: Packet) -> PublishMessage:
    if pkt.ptype != PUBLISH:
        raise MqttProtocolError("not a publish packet")
    qos = (pkt.flags >> 1) & 0x03
    topic, offset = parse_utf8(pkt.body, 0)
    packet_id = None
    if qos > 0:
        (packet_id,) = struct.unpack_from(">H", pkt.body, offset)
        offset += 2
    return PublishMessage(
        topic=topic,
        payload=pkt.body[offset:],
        qos=qos,
        retain=bool(pkt.flags & 0x01),
        packet_id=packet_id,
        dup=bool(pkt.flags & 0x08),
    )


def parse_connect(pkt: Packet) -> dict:
    name, offset = parse_utf8(pkt.body, 0)
    level = pkt.body[offset]
    flags = pkt.body[offset + 1]
    (keepalive,) = struct.unpack_from(">H", pkt.body, offset + 2)
    client_id, offset = parse_utf8(pkt.body, offset + 4)
    return {
        "protocol": name,
        "level": level,
        "clean_session": bool(flags & 0x02),
        "keepalive": keepalive,
        "client_id": client_id,
    }


def parse_subscribe(pkt: Packet) -> tuple[int, list[tuple[str, int]]]:
    (packet_id,) = struct.unpack_from(">H", pkt.body, 0)
    offset = 2
    filters = []
    while offset < len(pkt.body):
        topic, offset = parse_utf8(pkt.body, offset)
        filters.append((topic, pkt.body[offset]))
        offset += 1
    return packet_id, filters


def parse_unsubscribe(pkt: Packet) -> tuple[int, list[str]]:
    (packet_id,) = struct.unpack_from(">H", pkt.body, 0)
    offset = 2
    topics = []
    while offset < len(pkt.body):
        topic, offset = parse_utf8(pkt.body, offset)
        topics.append(topic)
    return packet_id, topics


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT filter match with + and trailing # wildcards."""
    if pattern == topic:
        return True
    p_parts = pattern.split("/")
    t_parts = topic.split("/")
    for i, p in enumerate(p_parts):
        if p == "#":
            return True
        if i >= len(t_parts):
            return False
        if p != "+" and p != t_parts[i]:
            return False
    return len(p_parts) == len(t_parts)
