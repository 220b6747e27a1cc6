"""Shared test fixtures."""

from __future__ import annotations

import asyncio
import sqlite3

import numpy as np
import pytest

from twinsieve.harness.cluster import LocalCluster, provision
from twinsieve.harness.synth import synth_dataset
from twinsieve.ledger import SessionLog, get_db, init_db
from twinsieve.mpc.field import FieldParams
from twinsieve.mpc.rng import SecureRandom
from twinsieve.net.peer import loopback_pair
from twinsieve.offline.bundle import bundle_load
from twinsieve.offline.ingest import ShareDatabase
from twinsieve.server.protocol import ProtocolServer

SMALL_PRIME = 251
MERSENNE_31 = 2**31 - 1


@pytest.fixture
def db():
    """In-memory SQLite ledger with schema initialized."""
    conn = sqlite3.connect(":memory:")
    conn.row_factory = sqlite3.Row
    init_db(conn)
    yield conn
    conn.close()


@pytest.fixture
def small_field():
    """p = 251 with an 8-bit comparison domain."""
    return FieldParams(p=SMALL_PRIME, f=3, n=8, f_doc=3)


@pytest.fixture
def mid_field():
    """A 31-bit field where products of unit vectors stay exact."""
    return FieldParams(p=MERSENNE_31, f=14, n=31, f_doc=14)


@pytest.fixture
def field():
    """The default deployment field."""
    return FieldParams()


@pytest.fixture
def rng():
    return SecureRandom("tests")


@pytest.fixture
def dataset():
    """64 random unit documents in 8 dimensions."""
    return synth_dataset(64, 8, seed=11)


@pytest.fixture
def deployment(tmp_path, dataset, field):
    """Dealt and ingested deployment for ``dataset`` with generous caps."""
    return provision(
        tmp_path / "deploy", dataset.embeddings, field,
        queries=6, c_m=64, step_m=16, xi=8, seed="fixture",
    )


@pytest.fixture
def cluster(deployment):
    """Both servers running in-process on loopback."""
    with LocalCluster(deployment, workers=2, chunk_size=16) as running:
        yield running


def make_servers(dep, links, chunk_size: int = 16) -> list[ProtocolServer]:
    """Protocol servers for both parties over an existing peer link pair."""
    servers = []
    for party in (0, 1):
        conn = get_db(dep.ledger_path(party))
        init_db(conn)
        servers.append(ProtocolServer(
            party,
            ShareDatabase.load(dep.database_path(party), party),
            bundle_load(dep.bundle_path(party), party, conn),
            links[party],
            session_log=SessionLog(conn),
            workers=2,
            chunk_size=chunk_size,
        ))
    return servers


def run_pair(dep, scenario, timeout: float = 60.0):
    """Run ``scenario(servers)`` on a fresh loop with both servers linked."""

    async def run():
        links = await loopback_pair(timeout=10.0)
        servers = make_servers(dep, links)
        try:
            return await asyncio.wait_for(scenario(servers), timeout)
        finally:
            for server in servers:
                server.close()
            for link in links:
                await link.close()

    return asyncio.run(run())


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# Upper 1e-4 point of the chi-square law with 15 degrees of freedom.
CHI_SQUARE_15_LIMIT = 42.6


def chi_square(values, p: int, bins: int = 16) -> float:
    """Pearson statistic of field elements against the uniform law, in equal-width bins."""
    index = (np.asarray(values, dtype=np.uint64).ravel().astype(object) * bins // p).astype(np.int64)
    observed = np.bincount(index, minlength=bins)
    expected = observed.sum() / bins
    return float(((observed - expected) ** 2 / expected).sum())
