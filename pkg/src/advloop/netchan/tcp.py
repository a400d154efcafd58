"""Persistent TCP transport carrying framed WireMessages with heartbeats."""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time

from advloop.netchan.wire import (
    MSG_HEARTBEAT,
    IncompleteFrame,
    ProtocolError,
    WireMessage,
    decode_prefix,
    encode,
    heartbeat,
)

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 0.5
MISSED_HEARTBEATS = 3


class LinkDown(ConnectionError):
    """The peer is gone: closed, reset, or silent for too many heartbeat periods."""


class ConnectFailed(ConnectionError):
    pass


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)


class Transport:
    """Reader thread feeds an ordered inbox; a monitor thread sends heartbeats and
    declares the link down after ``missed`` silent heartbeat periods.

    Safe for one producer calling :meth:`send` and one consumer calling :meth:`recv`.
    """

    def __init__(self, sock: socket.socket, heartbeat_interval: float = HEARTBEAT_INTERVAL,
                 missed: int = MISSED_HEARTBEATS):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._interval = heartbeat_interval
        self._missed = missed
        self._send_lock = threading.Lock()
        self.inbox: queue.Queue[WireMessage] = queue.Queue()
        self.down = threading.Event()
        self.down_at: float | None = None
        self.down_reason = ""
        self._last_rx = time.monotonic()
        self._hb_seq = 0
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._monitor = threading.Thread(target=self._monitor_loop, daemon=True)
        self._reader.start()
        self._monitor.start()

    def _mark_down(self, reason: str) -> None:
        if not self.down.is_set():
            self.down_at = time.monotonic()
            self.down_reason = reason
            self.down.set()
            log.info("link down: %s", reason)

    def _read_loop(self) -> None:
        buf = bytearray()
        try:
            while not self.down.is_set():
                chunk = self._sock.recv(65536)
                if not chunk:
                    self._mark_down("peer closed connection")
                    return
                buf += chunk
                self._last_rx = time.monotonic()
                while buf:
                    try:
                        msg, used = decode_prefix(buf)
                    except IncompleteFrame:
                        break
                    del buf[:used]
                    if msg.msg_type != MSG_HEARTBEAT:
                        self.inbox.put(msg)
        except ProtocolError as exc:
            self._mark_down(f"protocol error: {exc}")
        except OSError as exc:
            self._mark_down(f"socket error: {exc}")

    def _monitor_loop(self) -> None:
        limit = self._missed * self._interval
        next_hb = time.monotonic()
        while not self.down.is_set():
            now = time.monotonic()
            if now - self._last_rx >= limit:
                self._mark_down(f"{self._missed} heartbeats missed")
                return
            if now >= next_hb:
                try:
                    self.send(heartbeat(self._hb_seq, int(time.time() * 1e6)))
                except LinkDown:
                    return
                self._hb_seq = (self._hb_seq + 1) % 2**32
                next_hb = now + self._interval
            # wake at whichever comes first: next heartbeat or the silence deadline
            wake = min(next_hb, self._last_rx + limit)
            time.sleep(min(max(wake - time.monotonic(), 0.001), 0.05))

    def send(self, msg: WireMessage) -> None:
        if self.down.is_set():
            raise LinkDown(self.down_reason)
        data = encode(msg)
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            self._mark_down(f"send failed: {exc}")
            raise LinkDown(self.down_reason) from exc

    def recv(self, timeout: float | None = None) -> WireMessage | None:
        """Next message, or None on timeout. Raises LinkDown once the link is down and drained."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                return self.inbox.get(timeout=0.02)
            except queue.Empty:
                if self.down.is_set():
                    raise LinkDown(self.down_reason) from None
                if deadline is not None and time.monotonic() >= deadline:
                    return None

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._mark_down("closed locally")
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Server:
    def __init__(self, bind_address: str):
        host, port = parse_address(bind_address)
        self._sock = socket.create_server((host, port))
        self.address = "%s:%d" % self._sock.getsockname()[:2]

    def accept(self, timeout: float | None = None, **kwargs) -> Transport:
        self._sock.settimeout(timeout)
        conn, _ = self._sock.accept()
        conn.settimeout(None)
        return Transport(conn, **kwargs)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def tcp_serve(bind_address: str) -> Server:
    """Listen on ``host:port`` (port 0 picks a free one; see ``Server.address``)."""
    return Server(bind_address)


def tcp_connect(address: str, timeout: float = 2.0, **kwargs) -> Transport:
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectFailed(f"cannot connect to {address}: {exc}") from exc
    sock.settimeout(None)
    return Transport(sock, **kwargs)
