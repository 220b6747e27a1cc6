"""Server-to-server link: one TCP connection carrying every session's peer batches.

A background reader demultiplexes incoming frames into one queue per query id,
so concurrent sessions share the connection. Each receive checks that the frame
sits at the protocol position the caller expects.
"""

from __future__ import annotations

import asyncio
import logging
import socket
from collections import deque
from typing import Callable

import numpy as np

from twinsieve.errors import PeerTimeoutError, ProtocolError, SessionAbortError, StepMismatchError
from twinsieve.net.wire import (
    AbortPhase,
    Frame,
    MessageType,
    PeerBatch,
    PeerStage,
    TrafficMeter,
    decode_abort,
    decode_peer_batch,
    encode_abort,
    encode_peer_batch,
    read_frame,
    write_frames,
)

logger = logging.getLogger(__name__)

HELLO_ID = bytes(16)
_PEER_TYPES = (MessageType.PEER_OPEN_BATCH, MessageType.PEER_PUBLIC_BATCH, MessageType.ABORT)


class PeerLink:
    """Framed, demultiplexed connection to the other server."""

    def __init__(self, reader, writer, party: int, timeout: float = 60.0):
        self.reader = reader
        self.writer = writer
        self.party = party
        self.timeout = timeout
        self.meter = TrafficMeter()
        self._queues: dict[bytes, asyncio.Queue] = {}
        self._write_lock = asyncio.Lock()
        self._closed: Exception | None = None
        self._task: asyncio.Task | None = None
        self._retired: deque[bytes] = deque(maxlen=4096)
        self.on_abort: Callable[[bytes, str, str], None] | None = None

    def start(self) -> PeerLink:
        if self._task is None:
            self._task = asyncio.get_running_loop().create_task(self._read_loop())
        return self

    def _queue(self, query_id: bytes) -> asyncio.Queue:
        queue = self._queues.get(query_id)
        if queue is None:
            queue = self._queues[query_id] = asyncio.Queue()
        return queue

    async def _read_loop(self) -> None:
        try:
            while True:
                frame = await read_frame(self.reader)
                if frame is None:
                    raise ConnectionResetError("peer closed the connection")
                if frame.type not in _PEER_TYPES:
                    raise ProtocolError(f"unexpected {frame.type.name} frame on the peer link")
                self.meter.received(frame)
                if frame.query_id in self._retired:
                    logger.debug("peer: dropping %s for finished session=%s", frame.type.name, frame.query_id.hex())
                    continue
                self._queue(frame.query_id).put_nowait(frame)
                if frame.type == MessageType.ABORT and self.on_abort is not None:
                    phase, reason = decode_abort(frame.payload)
                    self.on_abort(frame.query_id, phase.label, reason)
        except asyncio.CancelledError:
            self._closed = ProtocolError("peer link closed")
        except Exception as exc:  # noqa: BLE001 - surfaces to every waiting session
            logger.warning("peer link failed: %s", exc)
            self._closed = exc
        for queue in self._queues.values():
            queue.put_nowait(None)

    @property
    def closed(self) -> bool:
        return self._closed is not None

    async def _send(self, frame: Frame, meter: TrafficMeter | None, category: str | None = None) -> None:
        if self._closed is not None:
            raise ProtocolError(f"peer link is down: {self._closed}")
        async with self._write_lock:
            await write_frames(self.writer, [frame])
        self.meter.sent(frame, category)
        if meter is not None:
            meter.sent(frame, category)

    async def send(
        self, query_id: bytes, kind: MessageType, batch: PeerBatch, meter: TrafficMeter | None = None
    ) -> None:
        await self._send(Frame(kind, query_id, encode_peer_batch(batch)), meter, f"{kind.name}:{batch.stage.name}")

    async def receive(
        self,
        query_id: bytes,
        kind: MessageType,
        stage: PeerStage,
        step: int,
        meter: TrafficMeter | None = None,
    ) -> PeerBatch:
        """Next batch for ``query_id``; it must match ``(kind, stage, step)``."""
        if self._closed is not None and self._queue(query_id).empty():
            raise ProtocolError(f"peer link is down: {self._closed}")
        try:
            frame = await asyncio.wait_for(self._queue(query_id).get(), self.timeout)
        except asyncio.TimeoutError as exc:
            raise PeerTimeoutError(
                f"no {kind.name} from the peer within {self.timeout:.1f}s (stage={stage.name} step={step})"
            ) from exc
        if frame is None:
            raise ProtocolError(f"peer link is down: {self._closed}")
        if frame.type == MessageType.ABORT:
            phase, reason = decode_abort(frame.payload)
            raise SessionAbortError(phase.label, f"peer aborted: {reason}")
        batch = decode_peer_batch(frame.payload)
        if meter is not None:
            meter.received(frame, f"{frame.type.name}:{batch.stage.name}")
        if frame.type != kind or batch.stage != stage or batch.step != step:
            raise StepMismatchError(
                f"expected {kind.name} stage={stage.name} step={step}, "
                f"peer sent {frame.type.name} stage={batch.stage.name} step={batch.step}"
            )
        return batch

    async def exchange(
        self,
        query_id: bytes,
        kind: MessageType,
        batch: PeerBatch,
        meter: TrafficMeter | None = None,
    ) -> PeerBatch:
        """Send our batch and return the peer's batch for the same position."""
        await self.send(query_id, kind, batch, meter)
        theirs = await self.receive(query_id, kind, batch.stage, batch.step, meter)
        if theirs.values.shape != np.atleast_1d(batch.values).shape:
            raise ProtocolError(
                f"peer batch holds {theirs.values.size} values, expected {np.size(batch.values)}"
            )
        if meter is not None:
            meter.round()
        return theirs

    async def abort(self, query_id: bytes, phase: AbortPhase, reason: str) -> None:
        """Tell the peer to abandon ``query_id``; failures to deliver are logged only."""
        try:
            await self._send(Frame(MessageType.ABORT, query_id, encode_abort(phase, reason)), None)
        except (ProtocolError, ConnectionError) as exc:
            logger.warning("session=%s could not notify peer of abort: %s", query_id.hex(), exc)

    def forget(self, query_id: bytes) -> None:
        self._queues.pop(query_id, None)
        if query_id != HELLO_ID:
            self._retired.append(query_id)

    async def handshake(self, token: bytes) -> None:
        """Confirm the peer is the other party of the same deployment."""
        words = np.frombuffer(token.ljust(16, b"\0")[:16], dtype="<u8").astype(np.uint64)
        ours = PeerBatch(PeerStage.HELLO, 0, self.party, words)
        theirs = await self.exchange(HELLO_ID, MessageType.PEER_OPEN_BATCH, ours)
        self.forget(HELLO_ID)
        if theirs.slot != 1 - self.party:
            raise ProtocolError(f"peer claims to be party {theirs.slot}; expected party {1 - self.party}")
        if not np.array_equal(theirs.values, words):
            raise ProtocolError("peer serves a different offline bundle")

    async def close(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def accept_peer(host: str, port: int, party: int, timeout: float = 60.0) -> PeerLink:
    """Party 0 side: listen on the peer address and take the first connection."""
    accepted: asyncio.Future = asyncio.get_running_loop().create_future()

    async def on_connect(reader, writer):
        if accepted.done():
            writer.close()
            return
        accepted.set_result((reader, writer))

    server = await asyncio.start_server(on_connect, host, port)
    logger.info("peer: party %d waiting on %s:%d", party, host, port)
    try:
        reader, writer = await accepted
    finally:
        server.close()
        await server.wait_closed()
    return PeerLink(reader, writer, party, timeout).start()


async def connect_peer(
    host: str, port: int, party: int, timeout: float = 60.0, retries: int = 50, delay: float = 0.2
) -> PeerLink:
    """Party 1 side: connect to party 0, retrying while it starts up."""
    last: Exception | None = None
    for attempt in range(max(retries, 1)):
        try:
            reader, writer = await asyncio.open_connection(host, port)
            logger.info("peer: party %d connected to %s:%d", party, host, port)
            return PeerLink(reader, writer, party, timeout).start()
        except OSError as exc:
            last = exc
            logger.debug("peer: connect attempt %d to %s:%d failed: %s", attempt + 1, host, port, exc)
            await asyncio.sleep(delay)
    raise ProtocolError(f"could not reach peer at {host}:{port}: {last}")


async def loopback_pair(timeout: float = 60.0) -> tuple[PeerLink, PeerLink]:
    """Two linked parties over a local socket pair, for tests and in-process clusters."""
    sock0, sock1 = socket.socketpair()
    r0, w0 = await asyncio.open_connection(sock=sock0)
    r1, w1 = await asyncio.open_connection(sock=sock1)
    return PeerLink(r0, w0, 0, timeout).start(), PeerLink(r1, w1, 1, timeout).start()
