"""Tests for frame encoding and traffic accounting."""

import asyncio

import numpy as np
import pytest

from twinsieve.errors import DecodeError, ProtocolError
from twinsieve.net.wire import (
    HEADER_SIZE,
    AbortPhase,
    Frame,
    MessageType,
    PeerBatch,
    PeerStage,
    TrafficMeter,
    decode_abort,
    decode_frame,
    decode_peer_batch,
    encode_abort,
    encode_frame,
    encode_peer_batch,
    read_frame,
)

QID = bytes(range(16))


def feed(data: bytes, eof: bool = True):
    """Run read_frame against a stream holding ``data``."""

    async def scenario():
        reader = asyncio.StreamReader()
        reader.feed_data(data)
        if eof:
            reader.feed_eof()
        frames = []
        while True:
            frame = await read_frame(reader, max_size=1024)
            if frame is None:
                return frames
            frames.append(frame)

    return asyncio.run(scenario())


def test_frame_layout():
    """A frame is a 4-byte length, a type byte, the query id and the payload."""
    data = encode_frame(Frame(MessageType.ITER_KEY, QID, b"abc"))
    assert len(data) == HEADER_SIZE + 3 == 24
    assert data[:4] == (20).to_bytes(4, "little")
    assert data[4] == MessageType.ITER_KEY
    assert decode_frame(data) == Frame(MessageType.ITER_KEY, QID, b"abc")


def test_bad_query_id():
    """Query ids are exactly 16 bytes."""
    with pytest.raises(ProtocolError):
        encode_frame(Frame(MessageType.ABORT, b"short"))


def test_decode_errors():
    """Truncated, padded and unknown-type frames are rejected."""
    data = encode_frame(Frame(MessageType.COUNT_SHARE, QID, b"\x01" * 8))
    with pytest.raises(DecodeError):
        decode_frame(data[:-1])
    with pytest.raises(DecodeError):
        decode_frame(data + b"\x00")
    with pytest.raises(DecodeError):
        decode_frame(b"\x01")
    bad_type = bytearray(data)
    bad_type[4] = 99
    with pytest.raises(ProtocolError):
        decode_frame(bytes(bad_type))


def test_stream_reads_back_to_back_frames():
    """Several frames in one buffer come out in order; clean EOF ends the stream."""
    frames = [Frame(MessageType.PROMPT_SHARE, QID, b"x" * 16), Frame(MessageType.ITER_KEY, QID, b"y")]
    assert feed(b"".join(encode_frame(f) for f in frames)) == frames
    assert feed(b"") == []


def test_stream_truncation_and_limits():
    """EOF inside a frame or an oversized length is an error."""
    data = encode_frame(Frame(MessageType.DC_SHARE, QID, b"z" * 10))
    with pytest.raises(DecodeError):
        feed(data[:2])
    with pytest.raises(DecodeError):
        feed(data[:-3])
    with pytest.raises(DecodeError):
        feed((4096).to_bytes(4, "little") + b"\x00" * 8)


def test_abort_payload():
    """Abort frames carry a phase and a UTF-8 reason."""
    payload = encode_abort(AbortPhase.BINARY_CHECK, "candidate vector is not binary")
    phase, reason = decode_abort(payload)
    assert phase is AbortPhase.BINARY_CHECK and reason == "candidate vector is not binary"
    assert phase.label == "binary-check"
    assert AbortPhase.from_label("count-check") is AbortPhase.COUNT_CHECK
    assert AbortPhase.from_label("nonsense") is AbortPhase.TRANSPORT
    with pytest.raises(DecodeError):
        decode_abort(payload[:-1])
    with pytest.raises(DecodeError):
        decode_abort(b"\x09\x00\x00")


def test_peer_batch():
    """Peer batches keep their stage, step, slot and values."""
    values = np.array([0, 1, 2**64 - 60], dtype=np.uint64)
    batch = decode_peer_batch(encode_peer_batch(PeerBatch(PeerStage.ITERATE, 4, 2, values)))
    assert (batch.stage, batch.step, batch.slot) == (PeerStage.ITERATE, 4, 2)
    assert np.array_equal(batch.values, values)
    with pytest.raises(DecodeError):
        decode_peer_batch(b"\x02" + b"\x00" * 14)
    with pytest.raises(DecodeError):
        decode_peer_batch(b"\x09" + b"\x00" * 12)


def test_traffic_meter():
    """Counters split by category and merge."""
    meter = TrafficMeter()
    frame = Frame(MessageType.ITER_KEY, QID, b"k" * 100)
    meter.sent(frame)
    meter.sent(frame)
    meter.received(Frame(MessageType.PEER_OPEN_BATCH, QID, b"v" * 8), "PEER_OPEN_BATCH:ITERATE")
    meter.round()
    snap = meter.snapshot()
    assert snap["sent"]["ITER_KEY"] == {"bytes": 2 * (HEADER_SIZE + 100), "payload": 200, "frames": 2}
    assert snap["received"]["PEER_OPEN_BATCH:ITERATE"]["payload"] == 8
    assert snap["rounds"] == 1

    other = TrafficMeter()
    other.sent(frame)
    other.round()
    meter.merge(other)
    assert meter.sent_frames["ITER_KEY"] == 3 and meter.rounds == 2
    assert meter.total_sent == 3 * frame.size
