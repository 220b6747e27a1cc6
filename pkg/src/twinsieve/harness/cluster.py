"""Two-server deployments for tests and benchmarks.

``provision`` deals and ingests into a directory. ``LocalCluster`` runs both
servers inside this process on a background event loop; ``ProcessCluster``
starts them as ``twinsieve serve`` subprocesses.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from twinsieve.config import parse_address
from twinsieve.errors import ProtocolError
from twinsieve.ledger import SessionLog, get_db, init_db
from twinsieve.mpc.field import FieldParams
from twinsieve.mpc.rng import SecureRandom
from twinsieve.net.peer import loopback_pair
from twinsieve.offline.bundle import bundle_load
from twinsieve.offline.dealer import dealer_generate
from twinsieve.offline.ingest import PublicMetadata, ShareDatabase, ingest
from twinsieve.server.daemon import ServerDaemon
from twinsieve.server.protocol import ProtocolServer

logger = logging.getLogger(__name__)


@dataclass
class Deployment:
    directory: Path
    metadata: PublicMetadata
    step_m: int
    c_m: int
    xi: int
    queries: int

    def database_path(self, party: int) -> Path:
        return self.directory / f"server{party}.tsdb"

    def bundle_path(self, party: int) -> Path:
        return self.directory / f"server{party}.bundle"

    def ledger_path(self, party: int) -> Path:
        return self.directory / f"server{party}.ledger.db"

    @property
    def metadata_path(self) -> Path:
        return self.directory / "public.yaml"


def provision(
    directory: str | Path,
    embeddings: np.ndarray,
    params: FieldParams,
    *,
    queries: int,
    c_m: int,
    step_m: int,
    xi: int,
    seed: int | str | None = None,
    truncate_bits: int = 0,
    renormalize: bool = False,
    audit: list[dict] | None = None,
) -> Deployment:
    """Run the dealer and the ingest for ``embeddings`` and write every artifact."""
    directory = Path(directory)
    N, m = np.asarray(embeddings).shape
    b0, b1 = dealer_generate(
        params, N, m, queries, seed, out_dir=directory, c_m=c_m, step_m=step_m, xi=xi, audit=audit,
    )
    rng = SecureRandom(f"{seed}:ingest" if seed is not None else None)
    db0, db1, meta = ingest(
        embeddings, params, rng, (b0.doc_mask(), b1.doc_mask()),
        renormalize=renormalize, truncate_bits=truncate_bits,
    )
    deployment = Deployment(directory, meta, step_m, c_m, xi, queries)
    db0.save(deployment.database_path(0))
    db1.save(deployment.database_path(1))
    meta.save(deployment.metadata_path)
    return deployment


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


class LocalCluster:
    """Both servers in one process, linked over a socket pair.

    Servers run on a dedicated loop thread so a client can drive them with
    ``asyncio.run`` from the calling thread.
    """

    def __init__(
        self,
        deployment: Deployment,
        *,
        workers: int = 2,
        chunk_size: int = 4096,
        peer_timeout: float = 30.0,
    ):
        self.deployment = deployment
        self.workers = workers
        self.chunk_size = chunk_size
        self.peer_timeout = peer_timeout
        self.protocols: list[ProtocolServer] = []
        self.daemons: list[ServerDaemon] = []
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="twinsieve-cluster", daemon=True)

    def _run(self, coro, timeout: float | None = None):
        return asyncio.run_coroutine_threadsafe(coro, self._loop).result(timeout)

    async def _start(self) -> None:
        dep = self.deployment
        links = await loopback_pair(self.peer_timeout)
        for party in (0, 1):
            conn = get_db(dep.ledger_path(party))
            init_db(conn)
            bundle = bundle_load(dep.bundle_path(party), party, conn)
            database = ShareDatabase.load(dep.database_path(party), party)
            self.protocols.append(ProtocolServer(
                party, database, bundle, links[party],
                truncate_bits=dep.metadata.truncate_bits,
                session_log=SessionLog(conn),
                workers=self.workers,
                chunk_size=self.chunk_size,
            ))
        token = self.protocols[0].bundle.header.bundle_id
        await asyncio.gather(links[0].handshake(token), links[1].handshake(token))
        for protocol in self.protocols:
            daemon = ServerDaemon(protocol, "127.0.0.1:0")
            await daemon.start()
            self.daemons.append(daemon)

    def start(self) -> LocalCluster:
        self._thread.start()
        self._run(self._start(), timeout=60)
        logger.info("local cluster up at %s", ", ".join(self.endpoints))
        return self

    @property
    def endpoints(self) -> list[str]:
        return [f"{host}:{port}" for host, port in (d.address for d in self.daemons)]

    def session(self, party: int, query_id: bytes) -> dict | None:
        session = self.protocols[party].sessions.get(query_id)
        return session.summary() if session is not None else None

    def stop(self) -> None:
        if not self._thread.is_alive():
            return

        async def shutdown():
            for daemon in self.daemons:
                await daemon.close()

        try:
            self._run(shutdown(), timeout=30)
        finally:
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=10)
            self._loop.close()

    def __enter__(self) -> LocalCluster:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class ProcessCluster:
    """Both servers as ``python -m twinsieve serve`` subprocesses on free ports."""

    def __init__(self, deployment: Deployment, *, workers: int = 4, log_level: str = "WARNING"):
        self.deployment = deployment
        self.workers = workers
        self.log_level = log_level
        self.listen = [f"127.0.0.1:{free_port()}" for _ in (0, 1)]
        self.stats = [f"127.0.0.1:{free_port()}" for _ in (0, 1)]
        self.peer = f"127.0.0.1:{free_port()}"
        self.processes: list[subprocess.Popen] = []

    def _config_file(self, party: int) -> Path:
        dep = self.deployment
        meta = dep.metadata
        data = {
            "log_level": self.log_level,
            "params": {"p": meta.p, "f": meta.f, "f_doc": meta.f_doc, "n": meta.n, "lam": meta.lam},
            "protocol": {"step_m": dep.step_m, "c_m": dep.c_m, "xi": dep.xi, "truncate_bits": meta.truncate_bits},
            "server": {
                "party": party,
                "listen": self.listen[party],
                "peer": self.peer,
                "database": str(dep.database_path(party)),
                "bundle": str(dep.bundle_path(party)),
                "ledger": str(dep.ledger_path(party)),
                "stats_listen": self.stats[party],
                "workers": self.workers,
            },
        }
        path = dep.directory / f"server{party}.yaml"
        path.write_text(yaml.safe_dump(data, sort_keys=False))
        return path

    def start(self, timeout: float = 60.0) -> ProcessCluster:
        for party in (0, 1):
            cmd = [sys.executable, "-m", "twinsieve", "serve", "--config", str(self._config_file(party))]
            self.processes.append(subprocess.Popen(cmd))
        deadline = time.monotonic() + timeout
        for address in self.listen:
            host, port = parse_address(address)
            while True:
                try:
                    with socket.create_connection((host, port), timeout=1.0):
                        break
                except OSError:
                    if time.monotonic() > deadline or any(p.poll() is not None for p in self.processes):
                        self.stop()
                        raise ProtocolError(f"server at {address} did not come up")
                    time.sleep(0.1)
        logger.info("process cluster up at %s", ", ".join(self.listen))
        return self

    @property
    def endpoints(self) -> list[str]:
        return list(self.listen)

    def session(self, party: int, query_id: bytes) -> dict | None:
        import httpx

        try:
            resp = httpx.get(f"http://{self.stats[party]}/sessions/{query_id.hex()}", timeout=10.0)
        except httpx.HTTPError as exc:
            logger.warning("stats request to server %d failed: %s", party, exc)
            return None
        return resp.json() if resp.status_code == 200 else None

    def stop(self) -> None:
        for proc in self.processes:
            if proc.poll() is None:
                proc.terminate()
        for proc in self.processes:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
        self.processes.clear()

    def __enter__(self) -> ProcessCluster:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

