"""Masked interval-containment gate: shares of 1{x in [x_l, x_r)} in one opening round.

The dealer (or the user) samples a mask r, publishes nothing, and hands each
party a share of r, two DCF keys at the masked endpoints and a share of the wrap
correction. The parties publish x + r, evaluate both DCFs there and add the
correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from twinsieve.errors import DecodeError, UsageError
from twinsieve.mpc.dcf import (
    DcfKey,
    dcf_eval,
    dcf_gen,
    dcf_key_from_records,
    dcf_key_records,
    dcf_key_size,
    key_dtype,
)
from twinsieve.mpc.field import FieldParams, fe_add, fe_sub
from twinsieve.mpc.shares import Share


def cmp_key_dtype(n: int) -> np.dtype:
    dcf = key_dtype(n)
    return np.dtype([
        ("party", "u1"),
        ("mask", "<u8"),
        ("lower", dcf),
        ("upper", dcf),
        ("wrap", "<u8"),
    ])


def cmp_key_size(n: int, lam: int = 128) -> int:
    return 1 + 8 + 2 * dcf_key_size(n, lam) + 8


@dataclass(eq=False)
class CmpKey:
    """One party's gate material for ``len(key)`` gates.

    A key participates in at most one masked opening; a batch of keys opens
    all of its gates together.
    """

    party: int
    mask: np.ndarray
    lower: DcfKey
    upper: DcfKey
    wrap: np.ndarray
    spent: bool = field(default=False, repr=False)

    def __len__(self) -> int:
        return self.mask.shape[0]

    def __getitem__(self, index) -> CmpKey:
        if isinstance(index, (int, np.integer)):
            index = slice(int(index), int(index) + 1)
        return CmpKey(
            self.party, self.mask[index], self.lower[index], self.upper[index], self.wrap[index], spent=self.spent
        )


def cmp_gen(params: FieldParams, x_l, x_r, rng) -> tuple[CmpKey, CmpKey]:
    """Keys for ``x in [x_l, x_r)``; ``x_r == p`` selects the ray ``[x_l, p)``."""
    p = params.p
    x_l = np.atleast_1d(np.asarray(x_l, dtype=np.uint64))
    x_r = np.broadcast_to(np.asarray(x_r, dtype=np.uint64), x_l.shape)
    if np.any(x_l > x_r):
        raise UsageError("interval start exceeds its end")
    if np.any(x_l >= np.uint64(p)) or np.any(x_r > np.uint64(p)):
        raise UsageError("interval endpoints must satisfy x_l < p and x_r <= p")
    count = x_l.size

    r = rng.field(p, count)
    lower_point = fe_add(x_l, r, params)
    ray = x_r == np.uint64(p)
    upper_point = fe_add(np.where(ray, np.uint64(0), x_r), r, params)
    # wrap = 1{x_r + r >= p} - 1{x_l + r >= p}; never negative because x_l <= x_r
    wraps_lower = lower_point < r
    wraps_upper = ray | (upper_point < r)
    wrap = (wraps_upper.astype(np.int8) - wraps_lower.astype(np.int8)).astype(np.uint64)

    lower0, lower1 = dcf_gen(params, lower_point, p - 1, rng)
    upper0, upper1 = dcf_gen(params, upper_point, 1, rng)
    r0 = rng.field(p, count)
    w0 = rng.field(p, count)
    k0 = CmpKey(0, r0, lower0, upper0, w0)
    k1 = CmpKey(1, fe_sub(r, r0, params), lower1, upper1, fe_sub(wrap, w0, params))
    return k0, k1


def cmp_eval_mask(key: CmpKey, xs: Share, params: FieldParams) -> Share:
    """This party's contribution ``[x] + [r]`` to the public masked values."""
    if key.party != xs.party:
        raise UsageError(f"key of party {key.party} applied to a share of party {xs.party}")
    if key.spent:
        raise UsageError("gate key already used for a masked opening")
    values = np.atleast_1d(np.asarray(xs.value, dtype=np.uint64))
    if len(key) not in (1, values.size):
        raise UsageError(f"{len(key)} gate keys cannot mask {values.size} values")
    key.spent = True
    return Share(key.party, fe_add(values, key.mask, params))


def cmp_eval_finish(key: CmpKey, x_hat, params: FieldParams) -> Share:
    """Shares of the indicator at the published masked values ``x_hat``."""
    x_hat = np.atleast_1d(np.asarray(x_hat, dtype=np.uint64))
    if x_hat.size and int(x_hat.max()) >= params.p:
        raise UsageError("masked value outside the field")
    y = fe_add(dcf_eval(key.lower, x_hat, params), dcf_eval(key.upper, x_hat, params), params)
    return Share(key.party, fe_add(y, key.wrap, params))


def cmp_key_records(key: CmpKey) -> np.ndarray:
    records = np.zeros(len(key), dtype=cmp_key_dtype(key.lower.n))
    records["party"] = key.party
    records["mask"] = key.mask
    records["lower"] = dcf_key_records(key.lower)
    records["upper"] = dcf_key_records(key.upper)
    records["wrap"] = key.wrap
    return records


def cmp_key_serialize(key: CmpKey) -> bytes:
    return cmp_key_records(key).tobytes()


def cmp_key_from_records(records: np.ndarray, params: FieldParams) -> CmpKey:
    if records.size == 0:
        raise DecodeError("empty gate key batch")
    parties = np.unique(records["party"])
    if parties.size != 1 or int(parties[0]) not in (0, 1):
        raise DecodeError("gate key batch mixes parties or names an unknown party")
    party = int(parties[0])
    lower = dcf_key_from_records(records["lower"], params)
    upper = dcf_key_from_records(records["upper"], params)
    if lower.party != party or upper.party != party:
        raise DecodeError("gate key embeds DCF keys of another party")
    mask = records["mask"].astype(np.uint64)
    wrap = records["wrap"].astype(np.uint64)
    if np.any(mask >= np.uint64(params.p)) or np.any(wrap >= np.uint64(params.p)):
        raise DecodeError("gate key share outside the field")
    return CmpKey(party, mask, lower, upper, wrap)


def cmp_key_deserialize(data: bytes | memoryview, params: FieldParams) -> CmpKey:
    size = cmp_key_size(params.n, params.lam)
    if not data or len(data) % size:
        raise DecodeError(f"gate keys are {size} bytes each, got {len(data)} bytes")
    records = np.frombuffer(data, dtype=cmp_key_dtype(params.n), count=len(data) // size)
    return cmp_key_from_records(records, params)
