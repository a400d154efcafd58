"""Binary message framing.

Layout (little-endian, 22-byte header):

    magic "ADVL" | version u8 | msg_type u8 | seq u32 | timestamp_us u64 | payload_len u32 | payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from advloop.render import LabelSet, decode_image, encode_image

MAGIC = b"ADVL"
VERSION = 1
MSG_FRAME, MSG_COMMAND, MSG_HEARTBEAT = 1, 2, 3
_HEADER = struct.Struct("<4sBBIQI")
HEADER_SIZE = _HEADER.size
_COMMAND = struct.Struct("<dd")
LABELS_MAGIC = b"ADLB"
_LABEL_ROW = struct.Struct("<Bdddd")


class ProtocolError(ValueError):
    pass


class NotAProtocolMessage(ProtocolError):
    def __init__(self, detail: str = ""):
        super().__init__("not-a-protocol-message" + (f": {detail}" if detail else ""))


class IncompleteFrame(ProtocolError):
    """More bytes are needed; retry once they arrive."""

    def __init__(self, needed: int):
        super().__init__(f"incomplete frame: need {needed} bytes")
        self.needed = needed


class UnsupportedVersion(ProtocolError):
    def __init__(self, version: int):
        super().__init__(f"unsupported version {version}")
        self.version = version


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    seq: int
    timestamp_us: int
    payload: bytes = b""

    def __post_init__(self):
        if self.msg_type not in (MSG_FRAME, MSG_COMMAND, MSG_HEARTBEAT):
            raise ValueError(f"unknown message type {self.msg_type}")
        if not 0 <= self.seq < 2**32:
            raise ValueError("seq must fit in u32")
        if not 0 <= self.timestamp_us < 2**64:
            raise ValueError("timestamp must fit in u64")
        if len(self.payload) >= 2**32:
            raise ValueError("payload too large")


def encode(msg: WireMessage) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, msg.msg_type, msg.seq, msg.timestamp_us, len(msg.payload)) + bytes(msg.payload)


def decode_prefix(buf: bytes) -> tuple[WireMessage, int]:
    """Decode the message at the start of ``buf``; returns it and the bytes consumed."""
    head = bytes(buf[: len(MAGIC)])
    if head != MAGIC[: len(head)]:
        raise NotAProtocolMessage("bad magic")
    if len(buf) < HEADER_SIZE:
        raise IncompleteFrame(HEADER_SIZE)
    _, version, msg_type, seq, ts, plen = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersion(version)
    end = HEADER_SIZE + plen
    if len(buf) < end:
        raise IncompleteFrame(end)
    try:
        msg = WireMessage(msg_type, seq, ts, bytes(buf[HEADER_SIZE:end]))
    except ValueError as exc:
        raise NotAProtocolMessage(str(exc)) from exc
    return msg, end


def decode(buf: bytes) -> WireMessage:
    return decode_prefix(buf)[0]


def heartbeat(seq: int, timestamp_us: int) -> WireMessage:
    return WireMessage(MSG_HEARTBEAT, seq, timestamp_us)


def command_message(seq: int, timestamp_us: int, v: float, omega: float) -> WireMessage:
    return WireMessage(MSG_COMMAND, seq, timestamp_us, _COMMAND.pack(v, omega))


def parse_command(msg: WireMessage) -> tuple[float, float]:
    if msg.msg_type != MSG_COMMAND or len(msg.payload) != _COMMAND.size:
        raise ProtocolError("not a 16-byte command payload")
    return _COMMAND.unpack(msg.payload)


def frame_message(seq: int, timestamp_us: int, image: np.ndarray, labels: LabelSet | None = None) -> WireMessage:
    """Frame payload: ADIM image, optionally followed by a ground-truth label section.

    The label section (``ADLB``, u16 count, then u8 class + 4 f64 box per
    object) is testbed instrumentation for the white-box attacker.
    """
    payload = encode_image(image)
    if labels is not None:
        payload += LABELS_MAGIC + struct.pack("<H", len(labels))
        payload += b"".join(_LABEL_ROW.pack(int(c), *map(float, b)) for c, b in zip(labels.classes, labels.boxes))
    return WireMessage(MSG_FRAME, seq, timestamp_us, payload)


def parse_frame(msg: WireMessage) -> tuple[np.ndarray, LabelSet | None]:
    if msg.msg_type != MSG_FRAME:
        raise ProtocolError("not a frame message")
    image, used = decode_image(msg.payload)
    rest = msg.payload[used:]
    if not rest:
        return image, None
    if rest[:4] != LABELS_MAGIC or len(rest) < 6:
        raise ProtocolError("malformed label section")
    (count,) = struct.unpack_from("<H", rest, 4)
    if len(rest) != 6 + count * _LABEL_ROW.size:
        raise ProtocolError("label section length mismatch")
    rows = [_LABEL_ROW.unpack_from(rest, 6 + i * _LABEL_ROW.size) for i in range(count)]
    if not rows:
        return image, LabelSet.empty()
    return image, LabelSet(np.array([r[1:] for r in rows]), np.array([r[0] for r in rows]))
