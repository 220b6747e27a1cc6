"""End-to-end queries against an in-process two-server cluster."""

import asyncio
import time

import numpy as np
import pytest

from twinsieve.client.driver import prepare_prompt, retrieve, threshold_keys
from twinsieve.config import parse_address
from twinsieve.errors import ConfigurationError, ProtocolAbortError, TransportError, UsageError
from twinsieve.harness.cluster import LocalCluster, free_port, provision
from twinsieve.harness.oracle import fixed_point_distances, plaintext_bisect, select_at_least
from twinsieve.harness.report import verify_traffic
from twinsieve.mpc.field import encode_fixed
from twinsieve.mpc.gate import cmp_key_serialize
from twinsieve.mpc.rng import SecureRandom
from twinsieve.mpc.shares import serialize_share, share
from twinsieve.net.wire import Frame, MessageType, read_frame, write_frames
from twinsieve.server.session import Phase


def test_query_matches_oracle(cluster, deployment, dataset):
    """The delivered set is exactly the documents at or above the final threshold."""
    rng = SecureRandom("e2e")
    qid = rng.bytes(16)
    result = retrieve(cluster.endpoints, dataset.prompt, 4, 2, deployment.metadata, rng=rng, query_id=qid, timeout=60)

    params = deployment.metadata.field_params()
    distances = fixed_point_distances(dataset.embeddings, dataset.prompt, params)
    assert result.indices == select_at_least(distances, result.threshold)
    assert 4 <= result.count <= 6
    assert result.stopped_by == "rule"
    assert result.rtt == result.iterations + 1
    assert result.keys_sent == result.iterations

    plain = plaintext_bisect(distances, 4, 2, deployment.metadata.distance_bound)
    assert [c for _, c in result.history] == [c for _, c in plain.history]

    summary = cluster.session(0, qid)
    assert summary["phase"] == "done" and summary["steps"] == result.iterations
    checks = verify_traffic(result, dataset.m, server_peer=summary["peer"])
    assert [c.term for c in checks] == [
        "prompt_upload", "candidate_return", "iteration_keys", "iteration_peer", "rtt",
    ]
    failed = [c.as_dict() for c in checks if not c.passed]
    assert not failed


def test_sequential_queries_use_fresh_slots(cluster, deployment, dataset):
    """Each query consumes the next offline slot on both servers."""
    slots = []
    for i in range(2):
        rng = SecureRandom(f"seq-{i}")
        qid = rng.bytes(16)
        retrieve(cluster.endpoints, dataset.prompt, 3, 3, deployment.metadata, rng=rng, query_id=qid)
        slots.append((cluster.session(0, qid)["slot"], cluster.session(1, qid)["slot"]))
    assert slots == [(0, 0), (1, 1)]


def test_leakage_and_metrics(cluster, deployment, dataset):
    """Metrics expose the rounds, traffic and count leakage of the query."""
    result = retrieve(cluster.endpoints, dataset.prompt, 2, 1, deployment.metadata, rng=SecureRandom("metrics"))
    metrics = result.metrics()
    assert metrics["iterations"] == result.iterations
    assert metrics["leakage_bits"] == pytest.approx(result.iterations * np.log2(dataset.N + 1), abs=1e-3)
    assert metrics["bytes_up"] > metrics["bytes_down"]
    assert result.leakage.functional_documents == result.count


def test_count_check_abort_reaches_client(tmp_path, dataset, field):
    """A stopping count above c_m makes both servers refuse the release."""
    dep = provision(tmp_path / "capped", dataset.embeddings, field, queries=2, c_m=4, step_m=16, xi=4, seed="abort")
    with LocalCluster(dep, workers=1, chunk_size=16) as running:
        with pytest.raises(ProtocolAbortError) as info:
            retrieve(running.endpoints, dataset.prompt, 8, 4, dep.metadata, rng=SecureRandom("abort"), timeout=30)
    assert info.value.phase == "count-check"


def test_step_cap_returns_partial_result(tmp_path, dataset, field):
    """A server-side step cap ends the loop with the last evaluated threshold."""
    dep = provision(tmp_path / "cap", dataset.embeddings, field, queries=1, c_m=64, step_m=2, xi=0, seed="cap")
    with LocalCluster(dep, workers=1, chunk_size=16) as running:
        result = retrieve(running.endpoints, dataset.prompt, 1, 0, dep.metadata, rng=SecureRandom("cap"))
    distances = fixed_point_distances(dataset.embeddings, dataset.prompt, field)
    assert result.stopped_by == "step-cap"
    assert result.keys_sent == 2 and result.iterations == 1 and result.rtt == 2
    assert result.indices == select_at_least(distances, result.threshold)


def test_tied_top_documents_finalize_at_step_cap(tmp_path, dataset, field):
    """More exact ties than k + xi at the top never fit the window; the step cap ends the query."""
    embeddings = dataset.embeddings.copy()
    embeddings[:12] = dataset.prompt
    dep = provision(tmp_path / "ties", embeddings, field, queries=1, c_m=64, step_m=8, xi=1, seed="ties")
    with LocalCluster(dep, workers=1, chunk_size=16) as running:
        result = retrieve(running.endpoints, dataset.prompt, 2, 1, dep.metadata, rng=SecureRandom("ties"))
    distances = fixed_point_distances(embeddings, dataset.prompt, field)
    assert result.stopped_by == "step-cap"
    assert result.keys_sent == 8 and result.iterations == 7 and result.rtt == 8
    assert all(c == 0 or c >= 12 for _, c in result.history)
    assert result.indices == select_at_least(distances, result.threshold)
    plain = plaintext_bisect(distances, 2, 1, dep.metadata.distance_bound, step_m=8)
    assert [c for _, c in result.history] == [c for _, c in plain.history]


def test_prepare_prompt_validation(deployment, dataset):
    """Prompts must match the dimension and be finite unit vectors."""
    meta = deployment.metadata
    assert np.array_equal(prepare_prompt(dataset.prompt, meta), dataset.prompt)
    with pytest.raises(UsageError):
        prepare_prompt(dataset.prompt[:4], meta)
    with pytest.raises(UsageError):
        prepare_prompt(dataset.prompt * 2, meta)
    bad = dataset.prompt.copy()
    bad[0] = np.nan
    with pytest.raises(UsageError):
        prepare_prompt(bad, meta)


def test_invalid_limits(deployment, dataset):
    """xi above k is refused before any connection is made."""
    with pytest.raises(ConfigurationError):
        retrieve(["127.0.0.1:1", "127.0.0.1:2"], dataset.prompt, 2, 3, deployment.metadata)


def test_unreachable_servers(deployment, dataset):
    """A refused connection is a transport error."""
    endpoints = [f"127.0.0.1:{free_port()}", f"127.0.0.1:{free_port()}"]
    with pytest.raises(TransportError):
        retrieve(endpoints, dataset.prompt, 2, 1, deployment.metadata, timeout=2)


def test_client_leaving_mid_query_releases_sessions(cluster, deployment, dataset):
    """A client that disconnects during bisection leaves no live session on either server."""
    params = deployment.metadata.field_params()
    rng = SecureRandom("leave")
    qid = rng.bytes(16)
    shares = share(encode_fixed(dataset.prompt, params), params, rng)
    keys = threshold_keys(0, params, rng)

    async def leave_after_first_count():
        conns = [await asyncio.open_connection(*parse_address(a)) for a in cluster.endpoints]
        for (_, writer), s, k in zip(conns, shares, keys):
            await write_frames(writer, [
                Frame(MessageType.PROMPT_SHARE, qid, serialize_share(s)),
                Frame(MessageType.ITER_KEY, qid, cmp_key_serialize(k)),
            ])
        replies = [await read_frame(reader) for reader, _ in conns]
        for _, writer in conns:
            writer.close()
            await writer.wait_closed()
        return replies

    replies = asyncio.run(leave_after_first_count())
    assert [f.type for f in replies] == [MessageType.COUNT_SHARE] * 2

    deadline = time.monotonic() + 10
    while time.monotonic() < deadline and any(cluster.session(p, qid)["phase"] != "aborted" for p in (0, 1)):
        time.sleep(0.05)
    for party in (0, 1):
        session = cluster.protocols[party].sessions[qid]
        assert session.phase == Phase.ABORTED
        assert session.material is None and session.distances is None and session.candidates is None
    assert cluster.protocols[0].stats()["live_sessions"] == 0

    follow_up = SecureRandom("after-leave")
    next_qid = follow_up.bytes(16)
    retrieve(cluster.endpoints, dataset.prompt, 3, 3, deployment.metadata, rng=follow_up, query_id=next_qid)
    assert cluster.session(0, next_qid)["slot"] == cluster.session(1, next_qid)["slot"] == 1
