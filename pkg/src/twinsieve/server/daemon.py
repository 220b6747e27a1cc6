"""Server process: client listener, peer link and optional stats endpoint."""

from __future__ import annotations

import asyncio
import logging

from twinsieve.config import Config, parse_address
from twinsieve.errors import DecodeError, ProtocolError
from twinsieve.ledger import SessionLog, get_db, init_db, recover_db
from twinsieve.net.peer import accept_peer, connect_peer
from twinsieve.net.wire import MessageType, read_frame, write_frames
from twinsieve.offline.bundle import bundle_load
from twinsieve.offline.ingest import ShareDatabase
from twinsieve.server.protocol import ProtocolServer

logger = logging.getLogger(__name__)


class ServerDaemon:
    """Serves client connections for one ``ProtocolServer``."""

    def __init__(self, protocol: ProtocolServer, listen: str, stats_listen: str = ""):
        self.protocol = protocol
        self.listen = listen
        self.stats_listen = stats_listen
        self._server: asyncio.AbstractServer | None = None
        self._stats_server = None
        self._stats_task: asyncio.Task | None = None
        self._clients: set[asyncio.Task] = set()

    @classmethod
    async def from_config(cls, config: Config, party: int | None = None) -> ServerDaemon:
        """Load the database, bundle and ledger, then link up with the peer server."""
        cfg = config.server_config(party)
        party = cfg.party
        database = ShareDatabase.load(cfg.database, party)
        conn = get_db(cfg.ledger)
        init_db(conn)
        for action in recover_db(conn):
            logger.warning("ledger recovery: %s", action)
        bundle = bundle_load(cfg.bundle, party, conn)
        logger.info(
            "server %d: N=%d m=%d bundle=%s capacity=%d remaining=%d",
            party, database.N, database.m, bundle.bundle_id, bundle.capacity, bundle.ledger.remaining(),
        )

        host, port = parse_address(cfg.peer)
        if party == 0:
            peer = await accept_peer(host, port, party, cfg.peer_timeout)
        else:
            peer = await connect_peer(host, port, party, cfg.peer_timeout, cfg.connect_retries)
        await peer.handshake(bundle.header.bundle_id)

        protocol = ProtocolServer(
            party, database, bundle, peer,
            truncate_bits=config.protocol.truncate_bits,
            session_log=SessionLog(conn),
            workers=cfg.workers,
            chunk_size=cfg.chunk_size,
        )
        return cls(protocol, cfg.listen, cfg.stats_listen)

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise ProtocolError("server not started")
        host, port = self._server.sockets[0].getsockname()[:2]
        return host, port

    async def start(self) -> None:
        host, port = parse_address(self.listen)
        self._server = await asyncio.start_server(self._on_client, host, port)
        logger.info("server %d: listening on %s:%d", self.protocol.party, *self.address)
        if self.stats_listen:
            await self._start_stats()

    async def _start_stats(self) -> None:
        import uvicorn

        from twinsieve.server.stats import create_stats_app

        host, port = parse_address(self.stats_listen)
        app = create_stats_app(self.protocol)
        self._stats_server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="warning"))
        self._stats_task = asyncio.get_running_loop().create_task(self._stats_server.serve())
        logger.info("server %d: stats on http://%s:%d", self.protocol.party, host, port)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def _on_client(self, reader, writer) -> None:
        task = asyncio.current_task()
        self._clients.add(task)
        peername = writer.get_extra_info("peername")
        owned: set[bytes] = set()
        try:
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    break
                if frame.type == MessageType.PROMPT_SHARE and frame.query_id not in self.protocol.sessions:
                    owned.add(frame.query_id)
                replies = await self.protocol.handle_frame(frame)
                if replies:
                    await write_frames(writer, replies)
                    self.protocol.note_sent(frame.query_id, replies)
        except (DecodeError, ProtocolError) as exc:
            logger.warning("client %s sent a malformed stream: %s", peername, exc)
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            logger.info("client %s disconnected: %s", peername, exc)
        finally:
            self._clients.discard(task)
            if owned:
                dropped = await self.protocol.abandon(owned, "client disconnected")
                if dropped:
                    logger.info("client %s left %d unfinished sessions; aborted", peername, dropped)
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def close(self) -> None:
        for task in list(self._clients):
            task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self._stats_server is not None:
            self._stats_server.should_exit = True
            if self._stats_task is not None:
                await self._stats_task
        await self.protocol.peer.close()
        self.protocol.close()


async def run_server(config: Config, party: int | None = None) -> None:
    """Entry point used by ``twinsieve serve``."""
    daemon = await ServerDaemon.from_config(config, party)
    try:
        await daemon.serve_forever()
    finally:
        await daemon.close()