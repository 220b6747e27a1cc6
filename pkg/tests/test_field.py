"""Tests for field arithmetic and fixed-point encoding."""

import math

import numpy as np
import pytest

from twinsieve.errors import ConfigurationError, RangeError
from twinsieve.mpc.field import (
    DEFAULT_PRIME,
    FieldParams,
    centered,
    decode_fixed,
    encode_fixed,
    fe_add,
    fe_matvec,
    fe_mul,
    fe_neg,
    fe_sub,
    fe_sum,
    from_offset,
    from_signed,
    is_prime,
    to_offset,
    trunc_signed,
)


class TestParams:
    def test_defaults(self):
        """Default profile is the 64-bit prime with f=32 and f_doc=30."""
        params = FieldParams()
        assert params.p == DEFAULT_PRIME == 2**64 - 59
        assert (params.f, params.f_doc, params.n, params.lam) == (32, 30, 64, 128)
        assert params.exact_products

    def test_rejects_composite(self):
        """A composite modulus is a configuration error."""
        with pytest.raises(ConfigurationError):
            FieldParams(p=255, f=3, n=8, f_doc=3)

    def test_rejects_narrow_domain(self):
        """n must cover p."""
        with pytest.raises(ConfigurationError):
            FieldParams(p=251, f=3, n=7, f_doc=3)

    def test_rejects_precision_too_large(self):
        """p must exceed 2^(f+1)."""
        with pytest.raises(ConfigurationError):
            FieldParams(p=251, f=7, n=8, f_doc=3)

    def test_is_prime(self):
        """Deterministic primality on known values."""
        assert is_prime(251)
        assert is_prime(2**31 - 1)
        assert is_prime(DEFAULT_PRIME)
        assert not is_prime(2**64 - 1)
        assert not is_prime(1)


class TestArithmetic:
    def test_scalar_ops(self, small_field):
        """Scalar add/sub/neg/mul reduce mod p."""
        assert fe_add(200, 100, small_field) == 49
        assert fe_sub(3, 5, small_field) == 249
        assert fe_neg(0, small_field) == 0
        assert fe_neg(1, small_field) == 250
        assert fe_mul(250, 250, small_field) == 1

    def test_vector_add_near_two_to_the_64(self, field):
        """Vector addition does not lose the carry for elements near 2^64."""
        a = np.array([field.p - 1, field.p - 2], dtype=np.uint64)
        b = np.array([field.p - 1, 5], dtype=np.uint64)
        assert fe_add(a, b, field).tolist() == [field.p - 2, 3]

    def test_vector_sub_wraps(self, field):
        """Subtraction below zero wraps to the top of the field."""
        a = np.array([0, 7], dtype=np.uint64)
        b = np.array([1, 7], dtype=np.uint64)
        assert fe_sub(a, b, field).tolist() == [field.p - 1, 0]

    def test_mul_matches_python_ints(self, field, rng):
        """Wide multiplication agrees with big-integer arithmetic."""
        a = rng.field(field.p, 32)
        b = rng.field(field.p, 32)
        expected = [int(x) * int(y) % field.p for x, y in zip(a, b)]
        assert fe_mul(a, b, field).tolist() == expected

    def test_sum_and_matvec(self, field, rng):
        """Sums and row products are exact mod p."""
        m = rng.field(field.p, (5, 7))
        v = rng.field(field.p, 7)
        assert fe_sum(m[0], field) == sum(int(x) for x in m[0]) % field.p
        expected = [sum(int(x) * int(y) for x, y in zip(row, v)) % field.p for row in m]
        assert fe_matvec(m, v, field).tolist() == expected

    def test_sum_near_modulus(self, field, rng):
        """Sums of elements close to p agree with big-integer sums."""
        top = np.full(3, field.p - 1, dtype=np.uint64)
        assert fe_sum(top, field) == 3 * (field.p - 1) % field.p
        values = rng.field(field.p, 1000)
        assert fe_sum(values, field) == sum(int(x) for x in values) % field.p
        rows = rng.field(field.p, (4, 300))
        assert fe_sum(rows, field, axis=1).tolist() == [sum(int(x) for x in row) % field.p for row in rows]

    def test_mul_by_numpy_scalar(self, field):
        """A uint64 scalar factor does not wrap at 2^64."""
        a = np.array([field.p - 1, 2], dtype=np.uint64)
        assert fe_mul(a, np.uint64(field.p - 1), field).tolist() == [1, field.p - 2]


class TestEncoding:
    def test_centered_roundtrip(self, small_field):
        """Signed values map into the field and back."""
        values = np.array([-125, -1, 0, 1, 125], dtype=np.int64)
        assert centered(from_signed(values, small_field), small_field).tolist() == values.tolist()

    def test_encode_truncates_toward_zero(self, field):
        """Encoding drops the fraction of |v| * 2^f and keeps the sign."""
        assert centered(encode_fixed(0.5, field), field) == 2**31
        assert encode_fixed(-0.5, field) == field.p - 2**31
        assert centered(encode_fixed(-0.3, field), field) == -1288490188
        assert centered(encode_fixed(0.3, field), field) == 1288490188
        assert centered(encode_fixed(-2**-33, field), field) == 0
        v = np.array([-0.3, -0.7, 0.7, -2**-33])
        expected = [-int(abs(x) * 2**32) if x < 0 else int(x * 2**32) for x in v]
        assert centered(encode_fixed(v, field), field).tolist() == expected

    def test_encode_decode_within_resolution(self, field, rng):
        """Decoding an encoding is within 2^-f of the input."""
        v = np.linspace(-1, 1, 101)
        back = decode_fixed(encode_fixed(v, field), field)
        assert np.all(np.abs(back - v) <= 2.0**-field.f)

    def test_doc_precision(self, field):
        """Documents encode at f_doc bits."""
        assert centered(encode_fixed(1.0, field, bits=field.f_doc), field) == 2**30

    def test_out_of_range(self, small_field):
        """Values beyond the centered range are rejected."""
        with pytest.raises(RangeError):
            encode_fixed(100.0, small_field)
        with pytest.raises(RangeError):
            encode_fixed(np.array([0.1, math.inf]), small_field)

    def test_truncation_floors_signed(self, field):
        """Truncation rounds toward minus infinity on the signed value."""
        x = from_signed(np.array([-5, 5, -8], dtype=np.int64), field)
        assert centered(trunc_signed(x, field, 2), field).tolist() == [-2, 1, -2]

    def test_offset_order(self, small_field):
        """Offset binary turns signed order into unsigned order."""
        signed = [-125, -3, 0, 4, 125]
        offsets = [to_offset(from_signed(s, small_field), small_field) for s in signed]
        assert offsets == sorted(offsets)
        assert offsets[0] == 0 and offsets[2] == small_field.half
        assert [centered(from_offset(u, small_field), small_field) for u in offsets] == signed
