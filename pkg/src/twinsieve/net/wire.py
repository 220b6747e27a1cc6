"""Binary framing shared by the client-server and server-server links.

Frame format::

    length u32 LE | type u8 | query id (16 bytes) | payload

``length`` counts the type byte, the query id and the payload, not itself.
"""

from __future__ import annotations

import asyncio
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from twinsieve.errors import DecodeError, ProtocolError

LENGTH_PREFIX = struct.Struct("<I")
FRAME_HEAD = struct.Struct("<B16s")
HEADER_SIZE = LENGTH_PREFIX.size + FRAME_HEAD.size
QUERY_ID_BYTES = 16
MAX_FRAME = 256 * 1024 * 1024

_ABORT = struct.Struct("<BH")
_PEER = struct.Struct("<BIQ")


class MessageType(IntEnum):
    PROMPT_SHARE = 1
    ITER_KEY = 2
    COUNT_SHARE = 3
    FINALIZE = 4
    DC_SHARE = 5
    ABORT = 6
    PEER_OPEN_BATCH = 7
    PEER_PUBLIC_BATCH = 8


class AbortPhase(IntEnum):
    INIT = 0
    ITERATING = 1
    FINALIZING = 2
    BINARY_CHECK = 3
    COUNT_CHECK = 4
    TRANSPORT = 5

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @classmethod
    def from_label(cls, label: str) -> AbortPhase:
        try:
            return cls[label.upper().replace("-", "_")]
        except KeyError:
            return cls.TRANSPORT


class PeerStage(IntEnum):
    HELLO = 0
    INIT = 1
    ITERATE = 2
    VERIFY = 3


@dataclass(frozen=True)
class Frame:
    type: MessageType
    query_id: bytes
    payload: bytes = b""

    @property
    def size(self) -> int:
        return HEADER_SIZE + len(self.payload)


def encode_frame(frame: Frame) -> bytes:
    if len(frame.query_id) != QUERY_ID_BYTES:
        raise ProtocolError(f"query id must be {QUERY_ID_BYTES} bytes, got {len(frame.query_id)}")
    length = FRAME_HEAD.size + len(frame.payload)
    if length > MAX_FRAME:
        raise DecodeError(f"frame of {length} bytes exceeds the {MAX_FRAME} byte limit")
    return LENGTH_PREFIX.pack(length) + FRAME_HEAD.pack(int(frame.type), frame.query_id) + frame.payload


def _parse_body(body: bytes) -> Frame:
    if len(body) < FRAME_HEAD.size:
        raise DecodeError(f"frame body of {len(body)} bytes is shorter than its header")
    kind, query_id = FRAME_HEAD.unpack_from(body)
    try:
        msg_type = MessageType(kind)
    except ValueError as exc:
        raise ProtocolError(f"unknown message type {kind}") from exc
    return Frame(msg_type, query_id, bytes(body[FRAME_HEAD.size:]))


def decode_frame(data: bytes) -> Frame:
    """Decode one complete frame, length prefix included."""
    if len(data) < LENGTH_PREFIX.size:
        raise DecodeError("truncated length prefix")
    (length,) = LENGTH_PREFIX.unpack_from(data)
    if len(data) != LENGTH_PREFIX.size + length:
        raise DecodeError(f"frame declares {length} bytes, got {len(data) - LENGTH_PREFIX.size}")
    return _parse_body(data[LENGTH_PREFIX.size:])


async def read_frame(reader, max_size: int = MAX_FRAME) -> Frame | None:
    """Read one frame; ``None`` on a clean end of stream between frames."""
    try:
        prefix = await reader.readexactly(LENGTH_PREFIX.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise DecodeError("stream ended inside a length prefix") from exc
    (length,) = LENGTH_PREFIX.unpack(prefix)
    if length > max_size:
        raise DecodeError(f"frame of {length} bytes is too large (limit {max_size})")
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise DecodeError(f"stream ended after {len(exc.partial)} of {length} frame bytes") from exc
    return _parse_body(body)


async def write_frames(writer, frames: list[Frame]) -> int:
    """Write frames back to back with a single drain; returns bytes written."""
    data = b"".join(encode_frame(frame) for frame in frames)
    writer.write(data)
    await writer.drain()
    return len(data)


def encode_abort(phase: AbortPhase, reason: str) -> bytes:
    text = reason.encode("utf-8")[:0xFFFF]
    return _ABORT.pack(int(phase), len(text)) + text


def decode_abort(payload: bytes) -> tuple[AbortPhase, str]:
    if len(payload) < _ABORT.size:
        raise DecodeError("abort payload shorter than its header")
    phase, length = _ABORT.unpack_from(payload)
    if len(payload) != _ABORT.size + length:
        raise DecodeError("abort reason length does not match the payload")
    try:
        return AbortPhase(phase), payload[_ABORT.size:].decode("utf-8", errors="replace")
    except ValueError as exc:
        raise DecodeError(f"unknown abort phase {phase}") from exc


@dataclass(frozen=True)
class PeerBatch:
    """Payload of a server-to-server batch: a packed vector tagged with its protocol position."""

    stage: PeerStage
    step: int
    slot: int
    values: np.ndarray


def encode_peer_batch(batch: PeerBatch) -> bytes:
    values = np.ascontiguousarray(np.atleast_1d(batch.values), dtype="<u8")
    return _PEER.pack(int(batch.stage), batch.step, batch.slot) + values.tobytes()


def decode_peer_batch(payload: bytes) -> PeerBatch:
    if len(payload) < _PEER.size or (len(payload) - _PEER.size) % 8:
        raise DecodeError(f"peer batch of {len(payload)} bytes is malformed")
    stage, step, slot = _PEER.unpack_from(payload)
    try:
        stage = PeerStage(stage)
    except ValueError as exc:
        raise DecodeError(f"unknown peer stage {stage}") from exc
    values = np.frombuffer(payload, dtype="<u8", offset=_PEER.size).astype(np.uint64)
    return PeerBatch(stage, step, slot, values)


@dataclass
class TrafficMeter:
    """Byte and frame counters per category, plus a round counter.

    The category is the message type name unless the caller names a finer one
    (the peer link uses ``TYPE:STAGE``).
    """

    sent_bytes: Counter = field(default_factory=Counter)
    sent_payload: Counter = field(default_factory=Counter)
    sent_frames: Counter = field(default_factory=Counter)
    received_bytes: Counter = field(default_factory=Counter)
    received_payload: Counter = field(default_factory=Counter)
    received_frames: Counter = field(default_factory=Counter)
    rounds: int = 0

    def sent(self, frame: Frame, category: str | None = None) -> None:
        name = category or frame.type.name
        self.sent_bytes[name] += frame.size
        self.sent_payload[name] += len(frame.payload)
        self.sent_frames[name] += 1

    def received(self, frame: Frame, category: str | None = None) -> None:
        name = category or frame.type.name
        self.received_bytes[name] += frame.size
        self.received_payload[name] += len(frame.payload)
        self.received_frames[name] += 1

    def round(self) -> None:
        self.rounds += 1

    @property
    def total_sent(self) -> int:
        return sum(self.sent_bytes.values())

    @property
    def total_received(self) -> int:
        return sum(self.received_bytes.values())

    def merge(self, other: TrafficMeter) -> None:
        for name in ("sent_bytes", "sent_payload", "sent_frames",
                     "received_bytes", "received_payload", "received_frames"):
            getattr(self, name).update(getattr(other, name))
        self.rounds += other.rounds

    def snapshot(self) -> dict:
        return {
            "sent": {k: {"bytes": v, "payload": self.sent_payload[k], "frames": self.sent_frames[k]}
                     for k, v in sorted(self.sent_bytes.items())},
            "received": {k: {"bytes": v, "payload": self.received_payload[k], "frames": self.received_frames[k]}
                         for k, v in sorted(self.received_bytes.items())},
            "bytes_sent": self.total_sent,
            "bytes_received": self.total_received,
            "rounds": self.rounds,
        }
