"""Tests for the read-only stats endpoint."""

import pytest
from fastapi.testclient import TestClient

from twinsieve.client.driver import retrieve
from twinsieve.mpc.rng import SecureRandom
from twinsieve.server.stats import create_stats_app


@pytest.fixture
def served(cluster, deployment, dataset):
    """Cluster with one finished query, plus a stats client for party 0."""
    rng = SecureRandom("stats")
    qid = rng.bytes(16)
    retrieve(cluster.endpoints, dataset.prompt, 3, 2, deployment.metadata, rng=rng, query_id=qid)
    return TestClient(create_stats_app(cluster.protocols[0])), qid, cluster


def test_health(served):
    client, _, _ = served
    resp = client.get("/health")
    assert resp.status_code == 200
    assert resp.json() == {"status": "ok", "party": 0, "peer_connected": True}


def test_stats(served, deployment):
    """Capacity and consumption reflect the finished query."""
    client, _, _ = served
    data = client.get("/stats").json()
    assert data["capacity"] == deployment.queries
    assert data["consumed"] == 1 and data["remaining"] == deployment.queries - 1
    assert data["sessions_by_phase"] == {"done": 1}
    assert data["peer"]["bytes_sent"] > 0


def test_sessions(served):
    """Live sessions are listed and retrievable by hex id."""
    client, qid, _ = served
    listed = client.get("/sessions").json()["sessions"]
    assert [s["query_id"] for s in listed] == [qid.hex()]
    one = client.get(f"/sessions/{qid.hex()}").json()
    assert one["phase"] == "done" and one["slot"] == 0
    assert one["client"]["received"]["PROMPT_SHARE"]["frames"] == 1


def test_session_from_ledger(served):
    """Sessions no longer in memory are read back from the ledger."""
    client, qid, cluster = served
    cluster.protocols[0].sessions.pop(qid)
    row = client.get(f"/sessions/{qid.hex()}").json()
    assert row["phase"] == "done" and row["party"] == 0


def test_session_errors(served):
    client, _, _ = served
    assert client.get("/sessions/not-hex").status_code == 400
    assert client.get(f"/sessions/{'00' * 16}").status_code == 404
