"""Self-contained MQTT 3.1.1 broker subset for development and tests.

The station proper only *speaks* MQTT (see mqtt_bridge); deployments use an
off-the-shelf broker. This module exists so the full stack, including the
browser console over MQTT-over-WebSocket, can run in environments where no
broker is installed (CI, the test suite). Supported: CONNECT, PUBLISH QoS
0/1 with retain, SUBSCRIBE/UNSUBSCRIBE with wildcards, PING, DISCONNECT.
Deliveries are made at QoS 0 (granted maximum), which is all the console
needs — application-level acknowledgement rides on `<cmd>/ack` topics.

Run standalone:  python -m ogsim.devbroker --port 1883 --ws-port 9001
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import socket
import struct
import threading

from . import mqtt_codec as mc

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class _WsFramer:
    """Server-side WebSocket byte-stream adapter (RFC 6455 subset)."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buf = bytearray()
        self._msg = bytearray()

    def handshake(self, first_chunk: bytes) -> bool:
        data = bytearray(first_chunk)
        while b"\r\n\r\n" not in data:
            chunk = self._sock.recv(4096)
            if not chunk:
                return False
            data.extend(chunk)
        head, _, rest = bytes(data).partition(b"\r\n\r\n")
        self._buf.extend(rest)
        key = None
        for line in head.split(b"\r\n")[1:]:
            name, _, value = line.partition(b":")
            if name.strip().lower() == b"sec-websocket-key":
                key = value.strip().decode()
        if key is None:
            return False
        accept = base64.b64encode(
            hashlib.sha1((key + _WS_GUID).encode()).digest()
        ).decode()
        self._sock.sendall(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {accept}\r\n"
                "Sec-WebSocket-Protocol: mqtt\r\n\r\n"
            ).encode()
        )
        return True

    def recv(self) -> bytes | None:
        """Next chunk of application bytes, or None when the peer closed."""
        while True:
            frame = self._parse_frame()
            if frame is not None:
                opcode, payload = frame
                if opcode == 8:      # close
                    return None
                if opcode == 9:      # ping -> pong
                    self._send_frame(10, payload)
                    continue
                if opcode in (0, 1, 2):
                    self._msg.extend(payload)
                    out = bytes(self._msg)
                    self._msg.clear()
                    if out:
                        return out
                continue
            chunk = self._sock.recv(65536)
            if not chunk:
                return None
            self._buf.extend(chunk)

    def _parse_frame(self):
        buf = self._buf
        if len(buf) < 2:
            return None
        opcode = buf[0] & 0x0F
        masked = bool(buf[1] & 0x80)
        length = buf[1] & 0x7F
        idx = 2
        if length == 126:
            if len(buf) < 4:
                return None
            (length,) = struct.unpack_from(">H", buf, 2)
            idx = 4
        elif length == 127:
            if len(buf) < 10:
                return None
            (length,) = struct.unpack_from(">Q", buf, 2)
            idx = 10
        mask = b""
        if masked:
            if len(buf) < idx + 4:
                return None
            mask = bytes(buf[idx:idx + 4])
            idx += 4
        if len(buf) < idx + length:
            return None
        payload = bytearray(buf[idx:idx + length])
        del buf[:idx + length]
        if masked:
            for i in range(len(payload)):
                payload[i] ^= mask[i % 4]
        return opcode, bytes(payload)

    def _send_frame(self, opcode: int, payload: bytes) -> None:
        header = bytearray([0x80 | opcode])
        n = len(payload)
        if n < 126:
            header.append(n)
        elif n < 65536:
            header.append(126)
            header.extend(struct.pack(">H", n))
        else:
            header.append(127)
            header.extend(struct.pack(">Q", n))
        self._sock.sendall(bytes(header) + payload)

    def send(self, data: bytes) -> None:
        self._send_frame(2, data)     # binary frame

    def close(self) -> None:
        try:
            self._send_frame(8, b"")
        except OSError:
            pass


class _Session:
    def __init__(self, broker: "MiniBroker", send, close):
        self.broker = broker
        self.send = send                 # callable(bytes)
        self.close = close
        self.subscriptions: list[str] = []
        self.lock = threading.Lock()

    def deliver(self, topic: str, payload: bytes, retain: bool = False) -> None:
        with self.lock:
            try:
                self.send(mc.encode_publish(topic, payload, qos=0, retain=retain))
            except OSError:
                pass


class MiniBroker:
    """Threaded broker core shared by the TCP and WebSocket listeners."""

    def __init__(self, port: int = 0, ws_port: int | None = None, host: str = "127.0.0.1"):
        self._sessions: list[_Session] = []
        self._retained: dict[str, bytes] = {}
        self._state_lock = threading.Lock()
        self._alive = True
        self._threads: list[threading.Thread] = []
        self._listeners: list[socket.socket] = []

        self._tcp = self._listen(host, port)
        self.port = self._tcp.getsockname()[1]
        self._spawn(self._accept_loop, self._tcp, False)
        self.ws_port = None
        if ws_port is not None:
            self._ws = self._listen(host, ws_port)
            self.ws_port = self._ws.getsockname()[1]
            self._spawn(self._accept_loop, self._ws, True)

    def _listen(self, host: str, port: int) -> socket.socket:
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((host, port))
        s.listen(16)
        self._listeners.append(s)
        return s

    def _spawn(self, target, *args) -> None:
        th = threading.Thread(target=target, args=args, daemon=True)
        th.start()
        self._threads.append(th)

    def _accept_loop(self, listener: socket.socket, websocket: bool) -> None:
        while self._alive:
            try:
                sock, _ = listener.accept()
            except OSError:
                return
            self._spawn(self._serve, sock, websocket)

    def _serve(self, sock: socket.socket, websocket: bool) -> None:
        parser = mc.StreamParser()
        session = None
        try:
            if websocket:
                framer = _WsFramer(sock)
                if not framer.handshake(b""):
                    sock.close()
                    return
                recv = framer.recv
                send = framer.send
            else:
                recv = lambda: (sock.recv(65536) or None)
                send = sock.sendall
            session = _Session(self, send, sock.close)
            while self._alive:
                data = recv()
                if data is None:
                    break
                for pkt in parser.feed(data):
                    if not self._handle(session, pkt):
                        return
        except (OSError, mc.MqttProtocolError):
            pass
        finally:
            if session is not None:
                with self._state_lock:
                    if session in self._sessions:
                        self._sessions.remove(session)
            try:
                sock.close()
            except OSError:
                pass

    def _handle(self, session: _Session, pkt: mc.Packet) -> bool:
        if pkt.ptype == mc.CONNECT:
            mc.parse_connect(pkt)   # validated for shape; contents unused
            with self._state_lock:
                self._sessions.append(session)
            session.send(mc.encode_connack())
        elif pkt.ptype == mc.PUBLISH:
            msg = mc.parse_publish(pkt)
            if msg.qos == 1 and msg.packet_id is not None:
                session.send(mc.encode_puback(msg.packet_id))
            self._route(msg)
        elif pkt.ptype == mc.SUBSCRIBE:
            packet_id, filters = mc.parse_subscribe(pkt)
            session.send(mc.encode_suback(packet_id, [0] * len(filters)))
            with self._state_lock:
                session.subscriptions.extend(f for f, _q in filters)
                retained = [
                    (t, p) for t, p in sorted(self._retained.items())
                    if any(mc.topic_matches(f, t) for f, _q in filters)
                ]
            for topic, payload in retained:
                session.deliver(topic, payload, retain=True)
        elif pkt.ptype == mc.UNSUBSCRIBE:
            packet_id, topics = mc.parse_unsubscribe(pkt)
            with self._state_lock:
                session.subscriptions = [
                    f for f in session.subscriptions if f not in topics
                ]
            session.send(mc.encode_unsuback(packet_id))
        elif pkt.ptype == mc.PINGREQ:
            session.send(mc.encode_pingresp())
        elif pkt.ptype == mc.DISCONNECT:
            return False
        return True

    def _route(self, msg: mc.PublishMessage) -> None:
        with self._state_lock:
            if msg.retain:
                if msg.payload:
                    self._retained[msg.topic] = msg.payload
                else:
                    self._retained.pop(msg.topic, None)
            targets = [
                s for s in self._sessions
                if any(mc.topic_matches(f, msg.topic) for f in s.subscriptions)
            ]
        for s in targets:
            s.deliver(msg.topic, msg.payload)

    def close(self) -> None:
        self._alive = False
        for s in self._listeners:
            try:
                s.close()
            except OSError:
                pass


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="development MQTT broker subset")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=1883)
    ap.add_argument("--ws-port", type=int, default=9001)
    args = ap.parse_args(argv)
    broker = MiniBroker(port=args.port, ws_port=args.ws_port, host=args.host)
    print(f"mqtt on {args.host}:{broker.port}, websocket on {args.host}:{broker.ws_port}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        broker.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
