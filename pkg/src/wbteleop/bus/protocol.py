"""Wire format for the teleoperation bus.

Every message is a fixed 24-byte little-endian header followed by the
payload:

    offset  size  field
    0       4     magic "TW2B"
    4       1     protocol version
    5       1     message type
    6       1     flags
    7       1     reserved (zero)
    8       4     sequence number (per publisher, per type)
    12      8     timestamp, nanoseconds
    20      4     payload length

The header never changes shape between versions; version bumps may only
add payload fields.  Payloads are capped at 4 MiB so a corrupt length
field cannot make a reader allocate unbounded memory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAGIC = b"TW2B"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 4 * 1024 * 1024

HEADER = struct.Struct("<4sBBBBIQI")
HEADER_SIZE = HEADER.size  # 24

FLAG_REPLY = 0x01
FLAG_ACK = 0x02


class MsgType(IntEnum):
    HANDSHAKE = 1
    POSE = 2
    CMD = 3
    STATE = 4
    FRAME = 5
    CTRL = 6
    LATENCY = 7


class CtrlEvent(IntEnum):
    START = 1
    PAUSE = 2
    RESUME = 3
    STOP = 4
    ESTOP = 5
    MARK_EPISODE_START = 6
    MARK_EPISODE_END = 7
    MARK_FAILURE = 8


@dataclass
class Message:
    type: MsgType
    payload: bytes = b""
    seq: int = 0
    timestamp: int = 0
    flags: int = 0

    def is_reply(self) -> bool:
        return bool(self.flags & FLAG_REPLY)

    def is_ack(self) -> bool:
        return bool(self.flags & FLAG_ACK)


def encode(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(msg.payload)} bytes exceeds the "
                         f"{MAX_PAYLOAD} byte cap")
    header = HEADER.pack(MAGIC, PROTOCOL_VERSION, int(msg.type),
                         msg.flags & 0xFF, 0, msg.seq & 0xFFFFFFFF,
                         msg.timestamp & 0xFFFFFFFFFFFFFFFF,
                         len(msg.payload))
    return header + msg.payload


def decode_header(buf: bytes) -> tuple[MsgType, int, int, int, int]:
    """(type, flags, seq, timestamp, payload_len) from one 24-byte header."""
    magic, version, mtype, flags, _, seq, timestamp, length = HEADER.unpack(buf)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ValueError(f"peer speaks protocol version {version}, "
                         f"this build speaks {PROTOCOL_VERSION}")
    if length > MAX_PAYLOAD:
        raise ValueError(f"declared payload of {length} bytes exceeds the "
                         f"{MAX_PAYLOAD} byte cap")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ValueError(f"unknown message type {mtype}") from None
    return mtype, flags, seq, timestamp, length


def decode(buf: bytes) -> Message:
    """One complete message from an exact buffer."""
    if len(buf) < HEADER_SIZE:
        raise ValueError(f"message of {len(buf)} bytes is shorter than the "
                         f"{HEADER_SIZE} byte header")
    mtype, flags, seq, timestamp, length = decode_header(buf[:HEADER_SIZE])
    if len(buf) != HEADER_SIZE + length:
        raise ValueError(f"message declares {length} payload bytes "
                         f"but carries {len(buf) - HEADER_SIZE}")
    return Message(type=mtype, payload=buf[HEADER_SIZE:], seq=seq,
                   timestamp=timestamp, flags=flags)


class StreamDecoder:
    """Incremental decoder for a TCP byte stream; tolerates any chunking."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < HEADER_SIZE:
                return out
            mtype, flags, seq, ts, length = decode_header(
                bytes(self._buf[:HEADER_SIZE]))
            total = HEADER_SIZE + length
            if len(self._buf) < total:
                return out
            payload = bytes(self._buf[HEADER_SIZE:total])
            del self._buf[:total]
            out.append(Message(type=mtype, payload=payload, seq=seq,
                               timestamp=ts, flags=flags))

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def pack_ctrl(event: CtrlEvent, state: int | None = None) -> bytes:
    """CTRL payload: the event code, plus the session state byte on acks."""
    body = bytes([int(event)])
    if state is not None:
        body += bytes([int(state)])
    return body


def unpack_ctrl(payload: bytes) -> tuple[CtrlEvent, int | None]:
    if not payload:
        raise ValueError("empty CTRL payload")
    event = CtrlEvent(payload[0])
    state = payload[1] if len(payload) > 1 else None
    return event, state


def pack_handshake(name: str, subscribe: list[str],
                   layout: dict | None = None,
                   rates: dict | None = None) -> bytes:
    return json.dumps({
        "version": PROTOCOL_VERSION,
        "name": name,
        "subscribe": sorted(subscribe),
        "layout": layout,
        "rates": rates or {},
    }, sort_keys=True).encode()


def unpack_handshake(payload: bytes) -> dict:
    try:
        info = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"handshake payload is not JSON: {exc}") from None
    if not isinstance(info, dict) or "version" not in info:
        raise ValueError("handshake payload missing 'version'")
    return info


def type_by_name(name: str) -> MsgType:
    try:
        return MsgType[name.upper()]
    except KeyError:
        raise ValueError(f"unknown message type name '{name}'") from None
