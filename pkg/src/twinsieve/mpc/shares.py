"""2-of-2 additive secret sharing over F_p."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from twinsieve.errors import DecodeError, UsageError
from twinsieve.mpc.field import FieldParams, fe_add, fe_mul, fe_neg, fe_sub

_HEADER = struct.Struct("<BQ")


@dataclass(frozen=True)
class Share:
    """One party's share of a field element or of a vector of them."""

    party: int
    value: int | np.ndarray

    def __post_init__(self) -> None:
        if self.party not in (0, 1):
            raise UsageError(f"party must be 0 or 1, got {self.party}")

    @property
    def is_vector(self) -> bool:
        return isinstance(self.value, np.ndarray)

    def __len__(self) -> int:
        return len(self.value) if self.is_vector else 1


def share(x, params: FieldParams, rng) -> tuple[Share, Share]:
    """Split ``x`` (int or uint64 array) into a uniformly random pair of shares."""
    if isinstance(x, np.ndarray):
        mask = rng.field(params.p, x.shape)
    else:
        mask = rng.field(params.p)
    return Share(0, mask), Share(1, fe_sub(x, mask, params))


def reconstruct(s0: Share, s1: Share, params: FieldParams):
    if {s0.party, s1.party} != {0, 1}:
        raise UsageError(f"reconstruct needs one share per party, got {s0.party} and {s1.party}")
    return fe_add(s0.value, s1.value, params)


def _same_party(a: Share, b: Share) -> int:
    if a.party != b.party:
        raise UsageError(f"cannot combine shares of party {a.party} and party {b.party}")
    return a.party


def add_local(a: Share, b: Share, params: FieldParams) -> Share:
    return Share(_same_party(a, b), fe_add(a.value, b.value, params))


def sub_local(a: Share, b: Share, params: FieldParams) -> Share:
    return Share(_same_party(a, b), fe_sub(a.value, b.value, params))


def neg_local(a: Share, params: FieldParams) -> Share:
    return Share(a.party, fe_neg(a.value, params))


def scale_by_public(a: Share, c, params: FieldParams) -> Share:
    return Share(a.party, fe_mul(a.value, c, params))


def add_public_const(a: Share, c, params: FieldParams) -> Share:
    """Add a public constant; only party 1 absorbs it."""
    if a.party == 0:
        return a
    return Share(1, fe_add(a.value, c, params))


def serialize_share(s: Share) -> bytes:
    values = np.atleast_1d(np.asarray(s.value, dtype=np.uint64))
    return _HEADER.pack(s.party, values.size) + values.astype("<u8").tobytes()


def deserialize_share(data: bytes | memoryview, params: FieldParams | None = None) -> Share:
    """Parse a share vector; elements are range-checked when ``params`` is given."""
    if len(data) < _HEADER.size:
        raise DecodeError(f"share header needs {_HEADER.size} bytes, got {len(data)}")
    party, count = _HEADER.unpack_from(data)
    if party not in (0, 1):
        raise DecodeError(f"share header names party {party}")
    expected = _HEADER.size + 8 * count
    if len(data) != expected:
        raise DecodeError(f"share vector of {count} elements needs {expected} bytes, got {len(data)}")
    values = np.frombuffer(data, dtype="<u8", count=count, offset=_HEADER.size).astype(np.uint64)
    if params is not None and values.size and int(values.max()) >= params.p:
        raise DecodeError("share element outside the field")
    return Share(party, values)
