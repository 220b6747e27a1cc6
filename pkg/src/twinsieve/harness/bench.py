"""End-to-end benchmark runs: synthetic data, a two-server cluster, and one report row per query."""

from __future__ import annotations

import logging
import math
from pathlib import Path

from twinsieve.client.driver import retrieve
from twinsieve.errors import UsageError
from twinsieve.harness.cluster import LocalCluster, ProcessCluster, provision
from twinsieve.harness.oracle import measure_recall
from twinsieve.harness.report import OracleReport, verify_traffic
from twinsieve.harness.synth import synth_dataset
from twinsieve.mpc.field import FieldParams
from twinsieve.mpc.rng import SecureRandom

logger = logging.getLogger(__name__)

MODES = ("local", "process")


def expected_iterations(N: int, k_prime: int) -> int:
    return max(math.ceil(math.log2(N / k_prime)), 0)


def split_k(k_prime: int) -> tuple[int, int]:
    """Split a result size k' into (k, xi) with xi <= k and k + xi = k'."""
    if k_prime < 1:
        raise UsageError(f"k' must be positive, got {k_prime}")
    k = (k_prime + 1) // 2
    return k, k_prime - k


def run_benchmark(
    sizes: list[int],
    k_primes: list[int],
    m: int,
    directory: str | Path,
    *,
    params: FieldParams | None = None,
    repeats: int = 1,
    seed: int = 7,
    mode: str = "local",
    workers: int = 4,
    layout: str = "uniform",
) -> OracleReport:
    """Run every (N, k') pair ``repeats`` times and collect recall, rounds, traffic and timing."""
    if mode not in MODES:
        raise UsageError(f"unknown cluster mode {mode!r}; choose from {', '.join(MODES)}")
    params = params or FieldParams()
    report = OracleReport()
    splits = [split_k(kp) for kp in k_primes]
    xi_max = max(xi for _, xi in splits)

    for N in sizes:
        data = synth_dataset(N, m, seed, layout=layout)
        step_m = max(expected_iterations(N, kp) for kp in k_primes) + 4
        dep = provision(
            Path(directory) / f"N{N}", data.embeddings, params,
            queries=repeats * len(k_primes), c_m=max(k_primes), step_m=step_m, xi=xi_max, seed=seed,
        )
        cluster_cls = LocalCluster if mode == "local" else ProcessCluster
        with cluster_cls(dep, workers=workers) as cluster:
            for k_prime, (k, xi) in zip(k_primes, splits):
                for r in range(repeats):
                    rng = SecureRandom(f"{seed}:{N}:{k_prime}:{r}")
                    query_id = rng.bytes(16)
                    result = retrieve(cluster.endpoints, data.prompt, k, xi, dep.metadata, rng=rng, query_id=query_id)
                    sessions = [cluster.session(party, query_id) or {} for party in (0, 1)]
                    checks = verify_traffic(
                        result, m, params.n, params.lam, server_peer=sessions[0].get("peer"),
                    )
                    report.add(
                        N=N, m=m, k_prime=k_prime, k=k, xi=xi, repeat=r,
                        count=result.count,
                        iterations=result.iterations,
                        expected_iterations=expected_iterations(N, k_prime),
                        rtt=result.rtt,
                        stopped_by=result.stopped_by,
                        recall=measure_recall(result.indices, data.embeddings, data.prompt),
                        bytes_up=result.bytes_up,
                        bytes_down=result.bytes_down,
                        leakage_bits=round(result.leakage.physical_bits, 3),
                        server_seconds=max(s.get("online_seconds", 0.0) for s in sessions),
                        client_seconds=round(result.seconds, 6),
                        traffic_ok=all(c.passed for c in checks),
                        framing_ok=all(c.framing_ok for c in checks),
                    )
                    logger.info(
                        "bench N=%d k_prime=%d repeat=%d count=%d S=%d rtt=%d",
                        N, k_prime, r, result.count, result.iterations, result.rtt,
                    )
    return report


def mean_server_seconds(report: OracleReport, N: int, k_prime: int) -> float:
    times = [r["server_seconds"] for r in report.rows if r["N"] == N and r["k_prime"] == k_prime]
    if not times:
        raise UsageError(f"no benchmark rows for N={N} k'={k_prime}")
    return sum(times) / len(times)
