"""Server side of the retrieval protocol.

One ``ProtocolServer`` per party. It computes distance shares for a new query,
answers bisection iterations with count shares, and runs the two verification
gates before releasing the candidate vector. Heavy vector work runs on a thread
pool in row chunks; all peer traffic goes through the shared ``PeerLink``.
"""

from __future__ import annotations

import asyncio
import logging
import sqlite3
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from typing import Callable, Iterable

import numpy as np

from twinsieve.errors import (
    ConfigurationError,
    ProtocolError,
    SessionAbortError,
    TwinsieveError,
)
from twinsieve.ledger import SessionLog
from twinsieve.mpc.dot import DotCorrelation, dot_finish, open_prompt_masks
from twinsieve.mpc.field import fe_add, fe_sum
from twinsieve.mpc.gate import CmpKey, cmp_eval_finish, cmp_eval_mask, cmp_key_deserialize
from twinsieve.mpc.shares import Share, add_public_const, deserialize_share, serialize_share
from twinsieve.net.peer import PeerLink
from twinsieve.net.wire import (
    AbortPhase,
    Frame,
    MessageType,
    PeerBatch,
    PeerStage,
    encode_abort,
)
from twinsieve.offline.bundle import OfflineBundle
from twinsieve.offline.ingest import ShareDatabase
from twinsieve.server.session import Phase, QuerySession

logger = logging.getLogger(__name__)


class ProtocolServer:
    def __init__(
        self,
        party: int,
        database: ShareDatabase,
        bundle: OfflineBundle,
        peer: PeerLink,
        *,
        truncate_bits: int = 0,
        session_log: SessionLog | None = None,
        workers: int = 4,
        chunk_size: int = 4096,
        history: int = 256,
    ):
        if database.party != party or bundle.party != party:
            raise ConfigurationError(
                f"party {party} was given database of party {database.party} and bundle of party {bundle.party}"
            )
        h = bundle.header
        p, q = database.params, h.params
        if (p.p, p.f, p.f_doc, p.n) != (q.p, q.f, q.f_doc, q.n):
            raise ConfigurationError("share database and offline bundle use different field parameters")
        if (database.N, database.m) != (h.N, h.m):
            raise ConfigurationError(
                f"share database is {database.N}x{database.m} but the bundle was dealt for {h.N}x{h.m}"
            )
        self.party = party
        self.params = database.params
        self.database = database
        self.bundle = bundle
        self.peer = peer
        self.step_m = h.step_m
        self.c_m = h.c_m
        self.truncate_bits = truncate_bits
        self.session_log = session_log
        self.chunk_size = max(chunk_size, 1)
        self.executor = ThreadPoolExecutor(max_workers=max(workers, 1), thread_name_prefix=f"twinsieve-{party}")
        self.sessions: dict[bytes, QuerySession] = {}
        self.history = max(history, 0)
        self._finished: deque[bytes] = deque()
        if peer is not None:
            peer.on_abort = self._on_peer_abort

    @property
    def N(self) -> int:
        return self.database.N

    @property
    def m(self) -> int:
        return self.database.m

    # -- helpers -----------------------------------------------------------

    async def _parallel(self, session: QuerySession, fn: Callable[[int, int], np.ndarray], total: int) -> np.ndarray:
        """Run ``fn(start, stop)`` over row chunks on the pool and concatenate."""
        loop = asyncio.get_running_loop()
        started = time.perf_counter()
        parts = await asyncio.gather(*(
            loop.run_in_executor(self.executor, fn, start, min(start + self.chunk_size, total))
            for start in range(0, total, self.chunk_size)
        ))
        session.online_seconds += time.perf_counter() - started
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint64)

    def _session(self, query_id: bytes) -> QuerySession:
        session = self.sessions.get(query_id)
        if session is None:
            raise ProtocolError(f"unknown query {query_id.hex()}")
        if session.phase == Phase.ABORTED:
            raise SessionAbortError(session.abort_phase or "aborted", session.abort_reason or "session aborted")
        return session

    def _log(self, session: QuerySession, **fields) -> None:
        if self.session_log is None:
            return
        try:
            self.session_log.update(session.query_id, **fields)
        except sqlite3.Error as exc:
            logger.warning("session=%s ledger update failed: %s", session.hex_id, exc)

    def _mark_aborted(self, session: QuerySession, phase: str, reason: str) -> None:
        session.phase = Phase.ABORTED
        session.abort_phase = phase
        session.abort_reason = reason
        session.release()
        self.peer.forget(session.query_id)
        logger.warning("session=%s phase=%s aborted: %s", session.hex_id, phase, reason)
        self._log(session, phase=Phase.ABORTED.value, abort_phase=phase, abort_reason=reason, steps=session.step)

    @asynccontextmanager
    async def _guard(self, session: QuerySession, phase: AbortPhase):
        """Turn any failure inside a protocol step into a session abort."""
        session.busy = True
        try:
            yield
        except SessionAbortError as exc:
            if session.phase != Phase.ABORTED:
                self._mark_aborted(session, exc.phase, exc.reason)
            raise
        except Exception as exc:
            if not isinstance(exc, TwinsieveError):
                logger.exception("session=%s unexpected failure", session.hex_id)
            reason = str(exc) or type(exc).__name__
            await self.peer.abort(session.query_id, phase, reason)
            self._mark_aborted(session, phase.label, reason)
            raise SessionAbortError(phase.label, reason) from exc
        finally:
            session.busy = False

    def _batch(self, session: QuerySession, stage: PeerStage, values: np.ndarray) -> PeerBatch:
        return PeerBatch(stage, session.step if stage != PeerStage.ITERATE else session.step + 1,
                         session.slot or 0, values)

    # -- protocol steps ----------------------------------------------------

    async def handle_query_init(self, query_id: bytes, prompt: Share | bytes) -> None:
        """Claim offline material, open the prompt masks and compute distance shares."""
        if query_id in self.sessions:
            raise ProtocolError(f"duplicate query id {query_id.hex()}")
        session = QuerySession(query_id, self.party)
        self.sessions[query_id] = session
        if self.session_log is not None:
            self.session_log.start(query_id, self.party)

        async with self._guard(session, AbortPhase.INIT):
            if isinstance(prompt, (bytes, bytearray, memoryview)):
                prompt = deserialize_share(prompt, self.params)
            if prompt.party != self.party:
                raise ProtocolError(f"prompt share is for party {prompt.party}")
            if len(prompt) != self.m:
                raise ProtocolError(f"prompt has {len(prompt)} dimensions, database has {self.m}")

            if self.party == 0:
                material = self.bundle.claim(query_id)
                session.slot, session.material = material.slot, material
                ours = open_prompt_masks(prompt, material.correlation, self.params)
                await self.peer.send(query_id, MessageType.PEER_OPEN_BATCH,
                                     self._batch(session, PeerStage.INIT, ours.value), session.peer_meter)
                theirs = await self.peer.receive(query_id, MessageType.PEER_OPEN_BATCH, PeerStage.INIT, 0,
                                                 session.peer_meter)
                if theirs.slot != session.slot:
                    raise ProtocolError(f"peer consumed slot {theirs.slot}, expected {session.slot}")
            else:
                theirs = await self.peer.receive(query_id, MessageType.PEER_OPEN_BATCH, PeerStage.INIT, 0,
                                                 session.peer_meter)
                material = self.bundle.claim(query_id, theirs.slot)
                session.slot, session.material = material.slot, material
                ours = open_prompt_masks(prompt, material.correlation, self.params)
                await self.peer.send(query_id, MessageType.PEER_OPEN_BATCH,
                                     self._batch(session, PeerStage.INIT, ours.value), session.peer_meter)
            if theirs.values.size != self.m:
                raise ProtocolError(f"peer opened {theirs.values.size} prompt values, expected {self.m}")
            session.peer_meter.round()
            self._log(session, slot=session.slot, bundle_id=self.bundle.bundle_id)

            prompt_diffs = fe_add(ours.value, theirs.values, self.params)
            corr = material.correlation

            def rows(start: int, stop: int) -> np.ndarray:
                part = DotCorrelation(corr.party, corr.prompt_mask,
                                      corr.product_mask[start:stop], corr.doc_mask[start:stop])
                return dot_finish(prompt_diffs, self.database.doc_diffs[start:stop], part,
                                  self.params, self.truncate_bits).value

            distances = await self._parallel(session, rows, self.N)
            session.distances = add_public_const(Share(self.party, distances), self.params.half, self.params).value
            session.transition(Phase.ITERATING)
            self._log(session, phase=session.phase.value)
            logger.info("session=%s slot=%d phase=iterating N=%d", session.hex_id, session.slot, self.N)

    async def handle_iteration(self, query_id: bytes, key: CmpKey | bytes) -> Share | None:
        """Count shares of ``d_j >= d_k``; ``None`` once the step cap is reached."""
        session = self._session(query_id)
        async with self._guard(session, AbortPhase.ITERATING):
            if session.phase != Phase.ITERATING:
                raise ProtocolError(f"iteration key not accepted in phase {session.phase.value}")
            if isinstance(key, (bytes, bytearray, memoryview)):
                key = cmp_key_deserialize(key, self.params)
            if key.party != self.party:
                raise ProtocolError(f"iteration key is for party {key.party}")
            if len(key) != 1:
                raise ProtocolError(f"an iteration takes one gate key, got {len(key)}")

            masked = cmp_eval_mask(key, Share(self.party, session.distances), self.params)
            theirs = await self.peer.exchange(
                query_id, MessageType.PEER_OPEN_BATCH,
                self._batch(session, PeerStage.ITERATE, masked.value), session.peer_meter,
            )
            x_hat = fe_add(masked.value, theirs.values, self.params)
            candidates = await self._parallel(
                session, lambda start, stop: cmp_eval_finish(key, x_hat[start:stop], self.params).value, self.N
            )
            session.candidates = candidates
            session.step += 1
            self._log(session, steps=session.step)

            if session.step >= self.step_m:
                session.transition(Phase.FINALIZING)
                self._log(session, phase=session.phase.value)
                logger.info("session=%s step=%d step cap reached; finalizing", session.hex_id, session.step)
                return None
            session.counts_sent += 1
            logger.debug("session=%s step=%d count share sent", session.hex_id, session.step)
            return Share(self.party, fe_sum(candidates, self.params))

    async def handle_finalize(self, query_id: bytes) -> Share:
        """Verify the candidate vector is binary and its count within ``c_m``, then release it."""
        session = self._session(query_id)
        async with self._guard(session, AbortPhase.FINALIZING):
            if session.phase == Phase.ITERATING:
                if session.step == 0:
                    raise ProtocolError("finalize requested before any iteration")
                session.transition(Phase.FINALIZING)
                self._log(session, phase=session.phase.value)
            elif session.phase != Phase.FINALIZING:
                raise ProtocolError(f"finalize not accepted in phase {session.phase.value}")

            material = session.material
            candidates = session.candidates
            count = fe_sum(candidates, self.params)
            masked_bits = cmp_eval_mask(material.binary_keys, Share(self.party, candidates), self.params)
            masked_count = cmp_eval_mask(material.count_key, Share(self.party, count), self.params)
            ours = np.concatenate([masked_bits.value, masked_count.value])
            theirs = await self.peer.exchange(
                query_id, MessageType.PEER_OPEN_BATCH, self._batch(session, PeerStage.VERIFY, ours),
                session.peer_meter,
            )
            x_hat = fe_add(ours, theirs.values, self.params)

            bits = await self._parallel(
                session,
                lambda start, stop: cmp_eval_finish(
                    material.binary_keys[start:stop], x_hat[start:stop], self.params
                ).value,
                self.N,
            )
            bound = cmp_eval_finish(material.count_key, x_hat[self.N:], self.params).value
            results = np.concatenate([bits, bound])
            theirs = await self.peer.exchange(
                query_id, MessageType.PEER_PUBLIC_BATCH, self._batch(session, PeerStage.VERIFY, results),
                session.peer_meter,
            )
            public = fe_add(results, theirs.values, self.params)

            failed = int(np.count_nonzero(public[: self.N] != np.uint64(1)))
            if failed:
                raise SessionAbortError(AbortPhase.BINARY_CHECK.label, f"{failed} candidate entries are not 0 or 1")
            if int(public[self.N]) != 1:
                raise SessionAbortError(AbortPhase.COUNT_CHECK.label, f"candidate count exceeds c_m={self.c_m}")

            session.transition(Phase.DONE)
            session.release()
            self.peer.forget(query_id)
            self._log(session, phase=session.phase.value, steps=session.step)
            logger.info("session=%s steps=%d phase=done", session.hex_id, session.step)
            return Share(self.party, candidates)

    # -- framing -----------------------------------------------------------

    async def handle_frame(self, frame: Frame) -> list[Frame]:
        """Dispatch one client request and return the reply frames."""
        query_id = frame.query_id
        session = self.sessions.get(query_id)
        if session is not None:
            session.client_meter.received(frame)
        try:
            if frame.type == MessageType.PROMPT_SHARE:
                await self.handle_query_init(query_id, frame.payload)
                self.sessions[query_id].client_meter.received(frame)
                return []
            if frame.type == MessageType.ITER_KEY:
                count = await self.handle_iteration(query_id, frame.payload)
                if count is not None:
                    return [Frame(MessageType.COUNT_SHARE, query_id, serialize_share(count))]
                notice = Frame(MessageType.FINALIZE, query_id)
                try:
                    dc = await self.handle_finalize(query_id)
                except SessionAbortError as exc:
                    return [notice, self._abort_frame(query_id, exc.phase, exc.reason)]
                return [notice, Frame(MessageType.DC_SHARE, query_id, serialize_share(dc))]
            if frame.type == MessageType.FINALIZE:
                dc = await self.handle_finalize(query_id)
                return [Frame(MessageType.DC_SHARE, query_id, serialize_share(dc))]
            raise ProtocolError(f"{frame.type.name} is not a client request")
        except SessionAbortError as exc:
            return [self._abort_frame(query_id, exc.phase, exc.reason)]
        except TwinsieveError as exc:
            logger.warning("query=%s rejected: %s", query_id.hex(), exc)
            return [self._abort_frame(query_id, AbortPhase.INIT.label, str(exc))]

    @staticmethod
    def _abort_frame(query_id: bytes, phase: str, reason: str) -> Frame:
        return Frame(MessageType.ABORT, query_id, encode_abort(AbortPhase.from_label(phase), reason))

    def note_sent(self, query_id: bytes, frames: list[Frame]) -> None:
        """Account reply frames; persists the session record once it has finished."""
        session = self.sessions.get(query_id)
        if session is None:
            return
        for frame in frames:
            session.client_meter.sent(frame)
        if session.finished:
            self._record_finish(session)

    def _record_finish(self, session: QuerySession) -> None:
        """Persist the final counters and keep at most ``history`` finished sessions in memory."""
        if session.query_id in self._finished:
            return
        if self.session_log is not None:
            c, p = session.client_meter, session.peer_meter
            try:
                self.session_log.finish(
                    session.query_id,
                    client_bytes_in=c.total_received, client_bytes_out=c.total_sent,
                    peer_bytes_in=p.total_received, peer_bytes_out=p.total_sent,
                    peer_rounds=p.rounds, online_seconds=session.online_seconds, steps=session.step,
                )
            except sqlite3.Error as exc:
                logger.warning("session=%s ledger finish failed: %s", session.hex_id, exc)
        self._finished.append(session.query_id)
        while len(self._finished) > self.history:
            self.sessions.pop(self._finished.popleft(), None)

    def _on_peer_abort(self, query_id: bytes, phase: str, reason: str) -> None:
        # a session inside a step picks the abort up from its peer queue instead
        session = self.sessions.get(query_id)
        if session is None or session.finished or session.busy:
            return
        self._mark_aborted(session, phase, f"peer aborted: {reason}")
        self._record_finish(session)

    async def abandon(self, query_ids: Iterable[bytes], reason: str) -> int:
        """Abort unfinished sessions whose client went away; returns how many were aborted."""
        aborted = 0
        for query_id in list(query_ids):
            session = self.sessions.get(query_id)
            if session is None or session.finished:
                continue
            phase = {
                Phase.ITERATING: AbortPhase.ITERATING,
                Phase.FINALIZING: AbortPhase.FINALIZING,
            }.get(session.phase, AbortPhase.INIT)
            await self.peer.abort(query_id, phase, reason)
            self._mark_aborted(session, phase.label, reason)
            self._record_finish(session)
            aborted += 1
        return aborted

    # -- introspection -----------------------------------------------------

    def stats(self) -> dict:
        phases: dict[str, int] = {}
        for session in self.sessions.values():
            phases[session.phase.value] = phases.get(session.phase.value, 0) + 1
        ledger = self.bundle.ledger
        return {
            "party": self.party,
            "N": self.N,
            "m": self.m,
            "step_m": self.step_m,
            "c_m": self.c_m,
            "bundle_id": self.bundle.bundle_id,
            "capacity": self.bundle.capacity,
            "consumed": ledger.consumed() if ledger else None,
            "remaining": ledger.remaining() if ledger else None,
            "live_sessions": sum(1 for s in self.sessions.values() if not s.finished),
            "sessions_by_phase": phases,
            "peer": self.peer.meter.snapshot(),
        }

    def close(self) -> None:
        self.executor.shutdown(wait=False, cancel_futures=True)
