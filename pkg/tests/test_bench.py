"""Benchmark harness runs and the large acceptance checks."""

import os

import pytest

from twinsieve.client.driver import retrieve
from twinsieve.errors import UsageError
from twinsieve.harness.bench import expected_iterations, mean_server_seconds, run_benchmark, split_k
from twinsieve.harness.cluster import LocalCluster, provision
from twinsieve.harness.oracle import fixed_point_distances, measure_recall, plaintext_bisect, topk_indices
from twinsieve.harness.synth import synth_dataset
from twinsieve.mpc.field import FieldParams
from twinsieve.mpc.rng import SecureRandom


def test_split_k():
    """k' splits into k and a slack no larger than k."""
    assert split_k(8) == (4, 4)
    assert split_k(5) == (3, 2)
    assert split_k(1) == (1, 0)
    with pytest.raises(UsageError):
        split_k(0)


def test_expected_iterations():
    assert expected_iterations(2**17, 16) == 13
    assert expected_iterations(2**17, 128) == 10
    assert expected_iterations(2**20, 16) == 16
    assert expected_iterations(64, 8) == 3
    assert expected_iterations(8, 16) == 0


def test_small_benchmark(tmp_path):
    """Uniform data converges in the expected number of counts with full recall."""
    report = run_benchmark([64, 128], [8], 8, tmp_path, repeats=1, workers=2)
    assert [r["iterations"] for r in report.rows] == [3, 4]
    assert all(r["iterations"] == r["expected_iterations"] for r in report.rows)
    assert all(r["rtt"] == r["iterations"] + 1 for r in report.rows)
    assert all(r["traffic_ok"] for r in report.rows)
    assert report.min_recall == 1.0
    assert mean_server_seconds(report, 64, 8) > 0
    with pytest.raises(UsageError):
        mean_server_seconds(report, 99, 8)


def test_unknown_mode(tmp_path):
    with pytest.raises(UsageError):
        run_benchmark([64], [8], 8, tmp_path, mode="cloud")


@pytest.mark.slow
@pytest.mark.parametrize("k_prime", [16, 64, 256])
def test_recall_at_eight_thousand_documents(tmp_path, k_prime):
    """N=2^13, m=256: recall of the delivered set is at least 0.99."""
    k, xi = split_k(k_prime)
    data = synth_dataset(2**13, 256, seed=21)
    dep = provision(
        tmp_path / "n13", data.embeddings, FieldParams(), queries=1, c_m=k_prime, step_m=24, xi=xi, seed=21,
    )
    with LocalCluster(dep, workers=4) as running:
        result = retrieve(running.endpoints, data.prompt, k, xi, dep.metadata, rng=SecureRandom(f"n13-{k_prime}"))
    assert result.stopped_by == "rule"
    assert k <= result.count <= k_prime
    assert measure_recall(result.indices, data.embeddings, data.prompt) >= 0.99


def test_exact_recall_on_separated_scores(tmp_path):
    """Scores spaced wider than the encoding error give the float top-k exactly."""
    data = synth_dataset(512, 32, seed=17, layout="uniform")
    dep = provision(tmp_path / "gap", data.embeddings, FieldParams(), queries=1, c_m=16, step_m=12, xi=8, seed=17)
    with LocalCluster(dep, workers=2) as running:
        result = retrieve(running.endpoints, data.prompt, 8, 8, dep.metadata, rng=SecureRandom("gap"))
    assert 8 <= result.count <= 16
    assert result.indices == sorted(topk_indices(data.embeddings, data.prompt, result.count))
    assert measure_recall(result.indices, data.embeddings, data.prompt) == 1.0


@pytest.mark.slow
@pytest.mark.parametrize("k_prime,counts", [(16, 13), (128, 10)])
def test_iterations_at_two_to_the_seventeen(k_prime, counts):
    """On the uniform layout, N=2^17 needs ceil(log2(N / k')) counts and one more round trip."""
    data = synth_dataset(2**17, 8, seed=3, layout="uniform")
    d = fixed_point_distances(data.embeddings, data.prompt, FieldParams())
    state = plaintext_bisect(d, *split_k(k_prime), 2**62)
    assert state.stopped and len(state.history) == counts == expected_iterations(2**17, k_prime)
    assert len(state.history) + 1 == {16: 14, 128: 11}[k_prime]


@pytest.mark.slow
def test_round_trips_end_to_end(tmp_path):
    """Secure runs take S + 1 round trips for both result sizes."""
    report = run_benchmark([2**13], [16, 128], 8, tmp_path, repeats=1, workers=4)
    assert [r["iterations"] for r in report.rows] == [9, 6]
    assert all(r["rtt"] == r["expected_iterations"] + 1 for r in report.rows)
    assert all(r["stopped_by"] == "rule" and r["traffic_ok"] for r in report.rows)
    assert report.min_recall == 1.0


@pytest.mark.slow
def test_server_time_doubles_with_n(tmp_path):
    """Doubling N from 2^15 to 2^16 scales online server time by 1.5 to 3."""
    report = run_benchmark([2**15, 2**16], [16], 16, tmp_path, repeats=2, workers=4)
    ratio = mean_server_seconds(report, 2**16, 16) / mean_server_seconds(report, 2**15, 16)
    assert 1.5 <= ratio <= 3.0


@pytest.mark.slow
def test_larger_result_size_is_not_slower(tmp_path):
    """Fewer bisection steps at k'=128 cost no more server time than k'=16."""
    report = run_benchmark([2**15], [16, 128], 16, tmp_path, repeats=2, workers=4)
    assert mean_server_seconds(report, 2**15, 128) <= mean_server_seconds(report, 2**15, 16)


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("TWINSIEVE_LARGE") != "1", reason="set TWINSIEVE_LARGE=1 for the 2^20 run")
def test_iterations_at_two_to_the_twenty():
    """N=2^20 with k'=16 on the uniform layout converges in 16 counts and 17 round trips."""
    data = synth_dataset(2**20, 8, seed=4, layout="uniform")
    d = fixed_point_distances(data.embeddings, data.prompt, FieldParams())
    state = plaintext_bisect(d, *split_k(16), 2**62)
    assert state.stopped and len(state.history) == 16 == expected_iterations(2**20, 16)
    assert len(state.history) + 1 == 17
