"""Trusted dealer: writes both parties' offline bundles in one pass."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from twinsieve.errors import ConfigurationError, TwinsieveError
from twinsieve.mpc.field import FieldParams, fe_add, fe_mul, fe_sub
from twinsieve.mpc.gate import CmpKey, cmp_eval_finish, cmp_gen, cmp_key_serialize
from twinsieve.mpc.rng import SecureRandom
from twinsieve.offline.bundle import BundleHeader, OfflineBundle, bundle_load, bundle_size, header_bytes

logger = logging.getLogger(__name__)

KEY_CHUNK = 8192
SELF_CHECK_SAMPLE = 64


class DealerSelfCheckError(TwinsieveError):
    code = "dealer-self-check"


def _write_pair(files, shares) -> None:
    for fh, values in zip(files, shares):
        fh.write(np.ascontiguousarray(values, dtype="<u8").tobytes())


def _split(values: np.ndarray, params: FieldParams, rng: SecureRandom) -> tuple[np.ndarray, np.ndarray]:
    first = rng.field(params.p, values.shape)
    return first, fe_sub(values, first, params)


def _check_gates(k0: CmpKey, k1: CmpKey, cases: dict[int, int], params: FieldParams, what: str) -> None:
    mask = fe_add(k0.mask, k1.mask, params)
    for x, expected in cases.items():
        x_hat = fe_add(np.full(len(k0), x % params.p, dtype=np.uint64), mask, params)
        y = fe_add(cmp_eval_finish(k0, x_hat, params).value, cmp_eval_finish(k1, x_hat, params).value, params)
        if np.any(y != np.uint64(expected)):
            raise DealerSelfCheckError(f"{what} gate evaluates incorrectly at x={x}")


def dealer_generate(
    params: FieldParams,
    N: int,
    m: int,
    queries: int,
    seed: bytes | str | int | None = None,
    *,
    out_dir: str | Path,
    c_m: int,
    step_m: int,
    xi: int,
    max_bundle_bytes: int | None = None,
    self_check: bool = True,
    audit: list[dict] | None = None,
    prefix: str = "server",
) -> tuple[OfflineBundle, OfflineBundle]:
    """Generate ``queries`` sessions of material for an N x m database.

    Writes ``<prefix>0.bundle`` and ``<prefix>1.bundle`` under ``out_dir`` and
    returns read views of both. A fixed ``seed`` gives byte-identical files.
    When ``audit`` is a list, the plaintext of every correlated value is
    appended to it (test mode only).
    """
    if queries < 1 or N < 1 or m < 1:
        raise ConfigurationError(f"dealer needs N, m and queries >= 1, got N={N} m={m} queries={queries}")
    params.check_capacity(N)
    if not 1 <= c_m < params.p - 1:
        raise ConfigurationError(f"count bound c_m={c_m} does not fit the field")

    rng = SecureRandom(seed if seed not in (None, "", b"") else None)
    bundle_id = rng.bytes(16)
    headers = [
        BundleHeader(party, params, m, N, c_m, step_m, xi, queries, bundle_id) for party in (0, 1)
    ]
    size = bundle_size(headers[0])
    if max_bundle_bytes is not None and size > max_bundle_bytes:
        raise ConfigurationError(
            f"bundle for N={N} m={m} queries={queries} needs {size} bytes, limit is {max_bundle_bytes}"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{prefix}{party}.bundle" for party in (0, 1)]
    logger.info("dealer: N=%d m=%d queries=%d bytes_per_bundle=%d", N, m, queries, size)

    with open(paths[0], "wb") as f0, open(paths[1], "wb") as f1:
        files = (f0, f1)
        for fh, header in zip(files, headers):
            fh.write(header_bytes(header))

        doc_mask = rng.field(params.p, (N, m))
        _write_pair(files, _split(doc_mask, params, rng))
        if audit is not None:
            audit.append({"section": "doc_mask", "value": doc_mask})

        for q in range(queries):
            prompt_mask = rng.field(params.p, m)
            product_mask = fe_mul(doc_mask, prompt_mask, params)
            prompt_shares = _split(prompt_mask, params, rng)
            product_shares = _split(product_mask, params, rng)
            if self_check:
                if np.any(fe_add(*prompt_shares, params) != prompt_mask) or np.any(
                    fe_add(*product_shares, params) != fe_mul(doc_mask, fe_add(*prompt_shares, params), params)
                ):
                    raise DealerSelfCheckError(f"triple shares for query {q} do not reconstruct")
            _write_pair(files, prompt_shares)
            _write_pair(files, product_shares)

            binary_masks = []
            for start in range(0, N, KEY_CHUNK):
                count = min(KEY_CHUNK, N - start)
                b0, b1 = cmp_gen(params, np.zeros(count, dtype=np.uint64), 2, rng)
                if self_check and start == 0:
                    sample = min(count, SELF_CHECK_SAMPLE)
                    _check_gates(b0[:sample], b1[:sample], {0: 1, 1: 1, 2: 0}, params, "binary-check")
                f0.write(cmp_key_serialize(b0))
                f1.write(cmp_key_serialize(b1))
                if audit is not None:
                    binary_masks.append(fe_add(b0.mask, b1.mask, params))

            c0, c1 = cmp_gen(params, 0, c_m + 1, rng)
            if self_check:
                _check_gates(c0, c1, {0: 1, c_m: 1, c_m + 1: 0, params.p - 1: 0}, params, "count-bound")
            f0.write(cmp_key_serialize(c0))
            f1.write(cmp_key_serialize(c1))

            if audit is not None:
                audit.append({
                    "section": "query",
                    "query": q,
                    "prompt_mask": prompt_mask,
                    "product_mask": product_mask,
                    "binary_mask": np.concatenate(binary_masks),
                    "count_mask": fe_add(c0.mask, c1.mask, params),
                })
            logger.debug("dealer: query slot %d written", q)

    return bundle_load(paths[0], 0), bundle_load(paths[1], 1)
