"""Plaintext oracles: the exact fixed-point arithmetic the servers share, and float top-k."""

from __future__ import annotations

import numpy as np

from twinsieve.client.bisect import BisectState, bisect_step
from twinsieve.mpc.field import FieldParams, centered, encode_fixed


def fixed_point_distances(
    embeddings: np.ndarray, prompt: np.ndarray, params: FieldParams, truncate_bits: int = 0
) -> np.ndarray:
    """Signed integer distances as the servers compute them (object dtype).

    Exact in the default mode. With ``truncate_bits`` the servers truncate
    shares, so each product may differ from this floor by one unit.
    """
    docs = centered(encode_fixed(embeddings, params, bits=params.f_doc), params).astype(object)
    query = centered(encode_fixed(prompt, params), params).astype(object)
    if truncate_bits:
        products = docs * query[None, :]
        shift = 2**truncate_bits
        return np.array([sum(v // shift for v in row) for row in products], dtype=object)
    return docs.dot(query)


def count_at_least(distances: np.ndarray, threshold: int) -> int:
    return int(sum(1 for d in distances if d >= threshold))


def select_at_least(distances: np.ndarray, threshold: int) -> list[int]:
    return [j for j, d in enumerate(distances) if d >= threshold]


def plaintext_bisect(
    distances: np.ndarray, k: int, xi: int, bound: int, step_m: int | None = None
) -> BisectState:
    """Run the bisection loop on plaintext counts; the transcript a client should see."""
    state = BisectState.initial(bound, k, xi)
    while True:
        if step_m is not None and state.step + 1 >= step_m:
            return state
        state = bisect_step(state, count_at_least(distances, state.d_k))
        if state.stopped or state.converged:
            return state


def topk_indices(embeddings: np.ndarray, prompt: np.ndarray, k: int) -> list[int]:
    """Float top-k by dot product; ties broken by the lower index."""
    scores = np.asarray(embeddings, dtype=np.float64) @ np.asarray(prompt, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return [int(i) for i in order[:k]]


def measure_recall(result: list[int], embeddings: np.ndarray, prompt: np.ndarray, k: int | None = None) -> float:
    """|result ∩ top-k| / |top-k|, with k defaulting to |result|."""
    k = len(result) if k is None else k
    if k == 0:
        return 1.0
    reference = set(topk_indices(embeddings, prompt, k))
    return len(reference & set(result)) / len(reference)
