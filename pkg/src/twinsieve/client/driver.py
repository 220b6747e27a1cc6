"""User side of a retrieval query.

The driver shares the prompt, pipelines it with the first iteration key, then
alternates count reconstruction and threshold updates until the stopping rule
fires (or a server forces finalization), and finally reconstructs and checks
the candidate vector.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from twinsieve.client.bisect import BisectState, LeakageReport, bisect_step, check_limits, leakage_report
from twinsieve.config import parse_address
from twinsieve.errors import (
    DecodeError,
    ProtocolAbortError,
    ServerInconsistencyError,
    TransportError,
    UsageError,
)
from twinsieve.mpc.field import FieldParams, encode_fixed, from_signed, to_offset
from twinsieve.mpc.gate import cmp_gen, cmp_key_serialize
from twinsieve.mpc.rng import SecureRandom
from twinsieve.mpc.shares import Share, deserialize_share, reconstruct, serialize_share, share
from twinsieve.net.wire import Frame, MessageType, TrafficMeter, decode_abort, read_frame, write_frames
from twinsieve.offline.ingest import PublicMetadata

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-3


@dataclass
class RetrievalResult:
    indices: list[int]
    count: int
    iterations: int          # counts received (S)
    keys_sent: int
    rtt: int
    threshold: int           # final d_k in distance units
    stopped_by: str          # "rule", "converged" or "step-cap"
    N: int
    k: int
    xi: int
    history: list[tuple[int, int]] = field(default_factory=list)
    meters: tuple[TrafficMeter, TrafficMeter] = field(default_factory=lambda: (TrafficMeter(), TrafficMeter()))
    seconds: float = 0.0

    @property
    def bytes_up(self) -> int:
        return sum(m.total_sent for m in self.meters)

    @property
    def bytes_down(self) -> int:
        return sum(m.total_received for m in self.meters)

    @property
    def leakage(self) -> LeakageReport:
        return leakage_report(self.iterations, self.N, self.k, self.xi, len(self.indices))

    def metrics(self) -> dict:
        return {
            "count": self.count,
            "iterations": self.iterations,
            "keys_sent": self.keys_sent,
            "rtt": self.rtt,
            "stopped_by": self.stopped_by,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "leakage_bits": round(self.leakage.physical_bits, 3),
            "seconds": round(self.seconds, 6),
            "servers": [m.snapshot() for m in self.meters],
        }


class _Endpoint:
    """One server conversation."""

    def __init__(self, party: int, reader, writer, timeout: float):
        self.party = party
        self.reader = reader
        self.writer = writer
        self.timeout = timeout
        self.meter = TrafficMeter()

    async def send(self, frames: list[Frame]) -> None:
        try:
            await write_frames(self.writer, frames)
        except (ConnectionError, OSError) as exc:
            raise TransportError(f"server {self.party}: send failed: {exc}") from exc
        for frame in frames:
            self.meter.sent(frame)

    async def receive(self, query_id: bytes) -> Frame:
        try:
            frame = await asyncio.wait_for(read_frame(self.reader), self.timeout)
        except asyncio.TimeoutError as exc:
            raise TransportError(f"server {self.party}: no reply within {self.timeout:.1f}s") from exc
        except (ConnectionError, OSError) as exc:
            raise TransportError(f"server {self.party}: connection failed: {exc}") from exc
        except DecodeError as exc:
            raise TransportError(f"server {self.party}: malformed reply: {exc}") from exc
        if frame is None:
            raise TransportError(f"server {self.party} closed the connection")
        self.meter.received(frame)
        if frame.query_id != query_id:
            raise ServerInconsistencyError(f"server {self.party} answered for another query")
        if frame.type == MessageType.ABORT:
            phase, reason = decode_abort(frame.payload)
            raise ProtocolAbortError(phase.label, reason, self.party)
        return frame

    async def close(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def _connect(endpoints: list[str], timeout: float) -> list[_Endpoint]:
    if len(endpoints) != 2:
        raise UsageError(f"a query needs exactly two server endpoints, got {len(endpoints)}")
    conns = []
    for party, address in enumerate(endpoints):
        host, port = parse_address(address)
        try:
            reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            for conn in conns:
                await conn.close()
            raise TransportError(f"cannot reach server {party} at {address}: {exc}") from exc
        conns.append(_Endpoint(party, reader, writer, timeout))
    return conns


def prepare_prompt(prompt, metadata: PublicMetadata) -> np.ndarray:
    v = np.asarray(prompt, dtype=np.float64).ravel()
    if v.size != metadata.m:
        raise UsageError(f"prompt has {v.size} dimensions, database has {metadata.m}")
    if not np.all(np.isfinite(v)):
        raise UsageError("prompt contains NaN or infinite values")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > NORM_TOLERANCE:
        raise UsageError(f"prompt must be unit-norm, got norm {norm:.6f}")
    return v


def threshold_keys(d_k: int, params: FieldParams, rng):
    """Gate keys selecting ``d_j >= d_k`` in offset order."""
    lower = to_offset(from_signed(d_k, params), params)
    return cmp_gen(params, lower, params.p, rng)


async def _exchange(conns: list[_Endpoint], query_id: bytes) -> tuple[Frame, Frame]:
    f0, f1 = await asyncio.gather(conns[0].receive(query_id), conns[1].receive(query_id))
    if f0.type != f1.type:
        raise ServerInconsistencyError(f"servers replied {f0.type.name} and {f1.type.name}")
    return f0, f1


def _reconstruct(frames: tuple[Frame, Frame], params: FieldParams, expected: int | None = None) -> np.ndarray:
    try:
        shares = [deserialize_share(frame.payload, params) for frame in frames]
    except DecodeError as exc:
        raise ServerInconsistencyError(f"malformed share from a server: {exc}") from exc
    if shares[0].party != 0 or shares[1].party != 1:
        raise ServerInconsistencyError("servers returned shares labelled with the wrong party")
    if expected is not None and (len(shares[0]) != expected or len(shares[1]) != expected):
        raise ServerInconsistencyError(f"expected {expected} shared values, got {len(shares[0])} and {len(shares[1])}")
    if len(shares[0]) != len(shares[1]):
        raise ServerInconsistencyError("servers returned share vectors of different lengths")
    return np.atleast_1d(reconstruct(shares[0], shares[1], params))


async def run_query(
    endpoints: list[str],
    prompt,
    k: int,
    xi: int,
    metadata: PublicMetadata,
    *,
    rng: SecureRandom | None = None,
    timeout: float = 300.0,
    query_id: bytes | None = None,
) -> RetrievalResult:
    """Retrieve between ``k`` and ``k + xi`` nearest documents for a unit-norm ``prompt``."""
    check_limits(k, xi)
    params = metadata.field_params()
    vector = prepare_prompt(prompt, metadata)
    rng = rng or SecureRandom()
    query_id = query_id or rng.bytes(16)
    started = time.perf_counter()

    s0, s1 = share(encode_fixed(vector, params), params, rng)
    state = BisectState.initial(metadata.distance_bound, k, xi)
    conns = await _connect(endpoints, timeout)
    keys_sent = rtt = 0
    stopped_by = "rule"
    try:
        k0, k1 = threshold_keys(state.d_k, params, rng)
        await asyncio.gather(
            conns[0].send([Frame(MessageType.PROMPT_SHARE, query_id, serialize_share(s0)),
                           Frame(MessageType.ITER_KEY, query_id, cmp_key_serialize(k0))]),
            conns[1].send([Frame(MessageType.PROMPT_SHARE, query_id, serialize_share(s1)),
                           Frame(MessageType.ITER_KEY, query_id, cmp_key_serialize(k1))]),
        )
        keys_sent += 1
        logger.info("query=%s started N=%d k=%d xi=%d", query_id.hex(), metadata.N, k, xi)

        while True:
            replies = await _exchange(conns, query_id)
            rtt += 1
            if replies[0].type == MessageType.FINALIZE:
                stopped_by = "step-cap"
                replies = await _exchange(conns, query_id)
                break
            if replies[0].type != MessageType.COUNT_SHARE:
                raise ServerInconsistencyError(f"unexpected {replies[0].type.name} during bisection")
            c = int(_reconstruct(replies, params, expected=1)[0])
            if c > metadata.N:
                raise ServerInconsistencyError(f"reconstructed count {c} exceeds N={metadata.N}")
            state = bisect_step(state, c)
            logger.debug("query=%s step=%d count=%d", query_id.hex(), state.step, c)
            if state.stopped or state.converged:
                stopped_by = "rule" if state.stopped else "converged"
                await asyncio.gather(*(conn.send([Frame(MessageType.FINALIZE, query_id)]) for conn in conns))
                replies = await _exchange(conns, query_id)
                rtt += 1
                break
            k0, k1 = threshold_keys(state.d_k, params, rng)
            await asyncio.gather(
                conns[0].send([Frame(MessageType.ITER_KEY, query_id, cmp_key_serialize(k0))]),
                conns[1].send([Frame(MessageType.ITER_KEY, query_id, cmp_key_serialize(k1))]),
            )
            keys_sent += 1

        if replies[0].type != MessageType.DC_SHARE:
            raise ServerInconsistencyError(f"expected candidate shares, got {replies[0].type.name}")
        dc = _reconstruct(replies, params, expected=metadata.N)
    finally:
        for conn in conns:
            await conn.close()

    if np.any(dc > np.uint64(1)):
        raise ServerInconsistencyError("candidate vector is not 0/1-valued")
    indices = [int(i) for i in np.flatnonzero(dc)]
    if stopped_by != "step-cap" and state.last_count is not None and len(indices) != state.last_count:
        raise ServerInconsistencyError(
            f"candidate vector selects {len(indices)} documents, last count was {state.last_count}"
        )
    final_threshold = state.history[-1][0] if state.history and stopped_by != "step-cap" else state.d_k
    result = RetrievalResult(
        indices=indices,
        count=len(indices),
        iterations=len(state.history),
        keys_sent=keys_sent,
        rtt=rtt,
        threshold=final_threshold,
        stopped_by=stopped_by,
        N=metadata.N,
        k=k,
        xi=xi,
        history=list(state.history),
        meters=(conns[0].meter, conns[1].meter),
        seconds=time.perf_counter() - started,
    )
    logger.info(
        "query=%s done count=%d iterations=%d rtt=%d stopped_by=%s",
        query_id.hex(), result.count, result.iterations, result.rtt, stopped_by,
    )
    return result


def retrieve(endpoints: list[str], prompt, k: int, xi: int, metadata: PublicMetadata, **kwargs) -> RetrievalResult:
    """Blocking wrapper around ``run_query``."""
    return asyncio.run(run_query(endpoints, prompt, k, xi, metadata, **kwargs))
