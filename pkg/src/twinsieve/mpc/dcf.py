"""Distributed comparison function keys for f(x) = beta * 1{x < alpha}.

Tree construction with per-level seed, control-bit and value corrections over the
payload group F_p. Generation and evaluation are vectorized: a ``DcfKey`` holds
one or more keys stacked along axis 0, and evaluation runs a fixed ``n`` levels
for every input regardless of its value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from twinsieve.errors import ConfigurationError, DecodeError, UsageError
from twinsieve.mpc.field import FieldParams, fe_add, fe_neg, fe_sub
from twinsieve.mpc.prg import SEED_BYTES, convert_seed, convert_value, prg_expand

_ONE = np.uint64(1)


def key_dtype(n: int) -> np.dtype:
    level = np.dtype([("seed", "u1", (SEED_BYTES,)), ("value", "<u8"), ("t", "u1")])
    return np.dtype([
        ("party", "u1"),
        ("n", "u1"),
        ("lam", "<u2"),
        ("seed", "u1", (SEED_BYTES,)),
        ("levels", level, (n,)),
        ("final", "<u8"),
    ])


def dcf_key_size(n: int, lam: int = 128) -> int:
    """Serialized bytes per key: 4 header + seed + n * (seed + 8 + 1) + 8."""
    seed = lam // 8
    return 4 + seed + n * (seed + 9) + 8


@dataclass(frozen=True)
class DcfKey:
    """One party's DCF key material; ``len(key)`` keys stacked along axis 0."""

    party: int
    n: int
    seed: np.ndarray        # (B, 16) uint8
    cw_seed: np.ndarray     # (B, n, 16) uint8
    cw_value: np.ndarray    # (B, n) uint64
    cw_t: np.ndarray        # (B, n) uint8, bit 0 = left, bit 1 = right
    cw_final: np.ndarray    # (B,) uint64
    lam: int = 128

    def __len__(self) -> int:
        return self.seed.shape[0]

    def __getitem__(self, index) -> DcfKey:
        if isinstance(index, (int, np.integer)):
            index = slice(int(index), int(index) + 1)
        return DcfKey(
            party=self.party,
            n=self.n,
            seed=self.seed[index],
            cw_seed=self.cw_seed[index],
            cw_value=self.cw_value[index],
            cw_t=self.cw_t[index],
            cw_final=self.cw_final[index],
            lam=self.lam,
        )


def _check_params(params: FieldParams) -> None:
    if params.lam != 8 * SEED_BYTES:
        raise ConfigurationError(f"DCF seeds are {8 * SEED_BYTES} bits, params ask for {params.lam}")
    if not 1 <= params.n <= 64:
        raise ConfigurationError(f"unsupported DCF domain width n={params.n}")


def _bit(values: np.ndarray, n: int, level: int) -> np.ndarray:
    return ((values >> np.uint64(n - 1 - level)) & _ONE).astype(np.uint8)


def _signed(values: np.ndarray, negate: np.ndarray, params: FieldParams) -> np.ndarray:
    return np.where(negate.astype(bool), fe_neg(values, params), values)


def dcf_gen(params: FieldParams, alpha, beta, rng) -> tuple[DcfKey, DcfKey]:
    """Generate key pairs for ``beta * 1{x < alpha}``; alpha and beta may be arrays."""
    _check_params(params)
    n = params.n
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.uint64))
    beta = np.broadcast_to(np.asarray(beta, dtype=np.uint64), alpha.shape)
    if n < 64 and alpha.size and int(alpha.max()) >= 2**n:
        raise UsageError(f"comparison point exceeds the {n}-bit domain")
    count = alpha.size

    roots = (rng.seeds(count), rng.seeds(count))
    s0, s1 = roots[0].copy(), roots[1].copy()
    t0 = np.zeros(count, dtype=np.uint8)
    t1 = np.ones(count, dtype=np.uint8)
    v_alpha = np.zeros(count, dtype=np.uint64)

    cw_seed = np.empty((count, n, SEED_BYTES), dtype=np.uint8)
    cw_value = np.empty((count, n), dtype=np.uint64)
    cw_t = np.empty((count, n), dtype=np.uint8)

    for level in range(n):
        bit = _bit(alpha, n, level)
        keep_right = bit.astype(bool)
        e0, e1 = prg_expand(s0), prg_expand(s1)
        col = keep_right[:, None]

        s0_keep = np.where(col, e0.seed_right, e0.seed_left)
        s1_keep = np.where(col, e1.seed_right, e1.seed_left)
        s0_lose = np.where(col, e0.seed_left, e0.seed_right)
        s1_lose = np.where(col, e1.seed_left, e1.seed_right)
        v0_keep = convert_value(np.where(keep_right, e0.value_right, e0.value_left), params)
        v1_keep = convert_value(np.where(keep_right, e1.value_right, e1.value_left), params)
        v0_lose = convert_value(np.where(keep_right, e0.value_left, e0.value_right), params)
        v1_lose = convert_value(np.where(keep_right, e1.value_left, e1.value_right), params)

        s_cw = s0_lose ^ s1_lose
        raw = fe_sub(fe_sub(v1_lose, v0_lose, params), v_alpha, params)
        # losing the left branch means every x on it is below alpha
        raw = np.where(keep_right, fe_add(raw, beta, params), raw)
        v_cw = _signed(raw, t1, params)
        v_alpha = fe_add(
            fe_add(fe_sub(v_alpha, v1_keep, params), v0_keep, params),
            _signed(v_cw, t1, params),
            params,
        )

        t_cw_left = e0.t_left ^ e1.t_left ^ bit ^ 1
        t_cw_right = e0.t_right ^ e1.t_right ^ bit
        t_cw_keep = np.where(keep_right, t_cw_right, t_cw_left)

        cw_seed[:, level] = s_cw
        cw_value[:, level] = v_cw
        cw_t[:, level] = t_cw_left | (t_cw_right << 1)

        s0 = s0_keep ^ (s_cw * t0[:, None])
        s1 = s1_keep ^ (s_cw * t1[:, None])
        t0 = np.where(keep_right, e0.t_right, e0.t_left) ^ (t0 & t_cw_keep)
        t1 = np.where(keep_right, e1.t_right, e1.t_left) ^ (t1 & t_cw_keep)

    final = fe_sub(fe_sub(convert_seed(s1, params), convert_seed(s0, params), params), v_alpha, params)
    final = _signed(final, t1, params)

    keys = tuple(
        DcfKey(
            party=party,
            n=n,
            seed=roots[party],
            cw_seed=cw_seed,
            cw_value=cw_value,
            cw_t=cw_t,
            cw_final=final,
            lam=params.lam,
        )
        for party in (0, 1)
    )
    return keys[0], keys[1]


def dcf_eval(key: DcfKey, xs, params: FieldParams) -> np.ndarray:
    """Evaluate this party's share at every input of ``xs``.

    ``key`` holds either one key (broadcast over all inputs) or one key per input.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=np.uint64))
    count = xs.size
    if len(key) not in (1, count):
        raise UsageError(f"{len(key)} keys cannot be evaluated on {count} inputs")
    if key.n != params.n:
        raise UsageError(f"key domain n={key.n} does not match params n={params.n}")
    if key.n < 64 and count and int(xs.max()) >= 2**key.n:
        raise UsageError(f"input exceeds the {key.n}-bit domain")

    s = np.array(np.broadcast_to(key.seed, (count, SEED_BYTES)))
    t = np.full(count, key.party, dtype=np.uint8)
    acc = np.zeros(count, dtype=np.uint64)
    negate = np.full(count, key.party, dtype=np.uint8)

    for level in range(key.n):
        e = prg_expand(s)
        cw_s = key.cw_seed[:, level]
        cw_t = key.cw_t[:, level]
        on = t.astype(bool)

        seed_left = e.seed_left ^ (cw_s * t[:, None])
        seed_right = e.seed_right ^ (cw_s * t[:, None])
        t_left = e.t_left ^ (cw_t & 1 & t)
        t_right = e.t_right ^ ((cw_t >> 1) & 1 & t)

        go_right = _bit(xs, key.n, level).astype(bool)
        value = convert_value(np.where(go_right, e.value_right, e.value_left), params)
        value = fe_add(value, np.where(on, key.cw_value[:, level], np.uint64(0)), params)
        acc = fe_add(acc, _signed(value, negate, params), params)

        s = np.where(go_right[:, None], seed_right, seed_left)
        t = np.where(go_right, t_right, t_left)

    leaf = fe_add(
        convert_seed(s, params),
        np.where(t.astype(bool), key.cw_final, np.uint64(0)),
        params,
    )
    return fe_add(acc, _signed(leaf, negate, params), params)


def dcf_key_serialize(key: DcfKey) -> bytes:
    return dcf_key_records(key).tobytes()


def dcf_key_records(key: DcfKey) -> np.ndarray:
    records = np.zeros(len(key), dtype=key_dtype(key.n))
    records["party"] = key.party
    records["n"] = key.n
    records["lam"] = key.lam
    records["seed"] = key.seed
    records["levels"]["seed"] = key.cw_seed
    records["levels"]["value"] = key.cw_value
    records["levels"]["t"] = key.cw_t
    records["final"] = key.cw_final
    return records


def dcf_key_from_records(records: np.ndarray, params: FieldParams | None = None) -> DcfKey:
    if records.size == 0:
        raise DecodeError("empty DCF key batch")
    parties = np.unique(records["party"])
    if parties.size != 1 or int(parties[0]) not in (0, 1):
        raise DecodeError("DCF key batch mixes parties or names an unknown party")
    if np.any(records["lam"] != 128):
        raise DecodeError("DCF key declares an unsupported seed length")
    n = records.dtype["levels"].shape[0]
    if np.any(records["n"] != n):
        raise DecodeError("DCF key header disagrees with its level count")
    levels = records["levels"]
    if np.any(levels["t"] > 3):
        raise DecodeError("DCF control-bit correction out of range")
    values = levels["value"].astype(np.uint64)
    final = records["final"].astype(np.uint64)
    if params is not None:
        if params.n != n:
            raise DecodeError(f"DCF key has n={n}, expected {params.n}")
        bound = np.uint64(params.p)
        if np.any(values >= bound) or np.any(final >= bound):
            raise DecodeError("DCF value correction outside the field")
    return DcfKey(
        party=int(parties[0]),
        n=n,
        seed=records["seed"].copy(),
        cw_seed=levels["seed"].copy(),
        cw_value=values,
        cw_t=levels["t"].copy(),
        cw_final=final,
    )


def dcf_key_deserialize(data: bytes | memoryview, params: FieldParams | None = None) -> DcfKey:
    """Parse one or more concatenated key records."""
    if len(data) < 4:
        raise DecodeError(f"DCF key needs at least 4 header bytes, got {len(data)}")
    n = int(data[1])
    size = dcf_key_size(n)
    if n == 0 or len(data) % size:
        raise DecodeError(f"DCF key of width {n} must be a multiple of {size} bytes, got {len(data)}")
    records = np.frombuffer(data, dtype=key_dtype(n), count=len(data) // size)
    return dcf_key_from_records(records, params)
