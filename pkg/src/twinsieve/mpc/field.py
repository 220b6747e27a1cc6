"""Prime-field arithmetic, fixed-point encoding and the offset bit representation.

Every operation accepts either Python ints (exact big-integer arithmetic) or
numpy ``uint64`` arrays holding canonical representatives in ``[0, p)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from twinsieve.errors import ConfigurationError, RangeError

DEFAULT_PRIME = 2**64 - 59

_U64 = np.uint64
_LOW32 = _U64(0xFFFFFFFF)
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for every n below 3.3e24."""
    if n < 2:
        return False
    for q in _MR_BASES:
        if n % q == 0:
            return n == q
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FieldParams:
    """Field and encoding parameters shared by every party.

    ``f`` is the prompt precision and ``f_doc`` the document precision; distances
    live at scale ``2**(f + f_doc)``. ``n`` is the comparison-domain width and
    ``lam`` the DCF seed length in bits.
    """

    p: int = DEFAULT_PRIME
    f: int = 32
    n: int = 64
    f_doc: int = 30
    lam: int = 128

    def __post_init__(self) -> None:
        if self.p >= 2**64:
            raise ConfigurationError(f"modulus must fit in 64 bits, got {self.p}")
        if not is_prime(self.p):
            raise ConfigurationError(f"modulus {self.p} is not prime")
        if not 1 <= self.n <= 64 or 2**self.n < self.p:
            raise ConfigurationError(f"comparison width n={self.n} cannot hold p={self.p}")
        for name, bits in (("f", self.f), ("f_doc", self.f_doc)):
            if bits < 0 or self.p <= 2 ** (bits + 1):
                raise ConfigurationError(f"p must exceed 2^({name}+1), got {name}={bits}")
        if self.lam != 128:
            raise ConfigurationError(f"only lam=128 seeds are supported, got {self.lam}")

    @property
    def half(self) -> int:
        return self.p // 2

    @property
    def distance_bits(self) -> int:
        return self.f + self.f_doc

    @property
    def exact_products(self) -> bool:
        """True when a dot product of two unit vectors cannot leave the centered range."""
        return 2**self.distance_bits < self.half

    def check_capacity(self, count: int) -> None:
        if count >= self.p:
            raise ConfigurationError(f"field of size {self.p} cannot count {count} documents")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, np.integer)) or (isinstance(x, np.ndarray) and x.ndim == 0)


def as_elements(x) -> np.ndarray:
    return np.asarray(x, dtype=_U64)


def fe_add(a, b, params: FieldParams):
    if _is_scalar(a) and _is_scalar(b):
        return (int(a) + int(b)) % params.p
    a, b = as_elements(a), as_elements(b)
    p = _U64(params.p)
    s = a + b
    return np.where((s < a) | (s >= p), s - p, s)


def fe_sub(a, b, params: FieldParams):
    if _is_scalar(a) and _is_scalar(b):
        return (int(a) - int(b)) % params.p
    a, b = as_elements(a), as_elements(b)
    d = a - b
    return np.where(a < b, d + _U64(params.p), d)


def fe_neg(a, params: FieldParams):
    if _is_scalar(a):
        return -int(a) % params.p
    a = as_elements(a)
    return np.where(a == 0, a, _U64(params.p) - a)


def _wide(x) -> np.ndarray:
    """Elements as Python ints in an object array, for exact wide products."""
    return as_elements(x).astype(object)


def fe_mul(a, b, params: FieldParams):
    if _is_scalar(a) and _is_scalar(b):
        return int(a) * int(b) % params.p
    wide = _wide(a) * _wide(b)
    return (wide % params.p).astype(_U64)


def fe_sum(a, params: FieldParams, axis: int = -1):
    """Sum along ``axis`` mod p; exact for fewer than 2**32 terms."""
    a = as_elements(a)
    lo = (a & _LOW32).sum(axis=axis, dtype=_U64)
    hi = (a >> _U64(32)).sum(axis=axis, dtype=_U64)
    if np.ndim(lo) == 0:
        return (int(hi) * 2**32 + int(lo)) % params.p
    return ((hi.astype(object) * 2**32 + lo.astype(object)) % params.p).astype(_U64)


def fe_matvec(matrix, vector, params: FieldParams) -> np.ndarray:
    """Row-wise inner products ``matrix @ vector`` mod p."""
    wide = _wide(matrix).dot(_wide(vector))
    return (np.asarray(wide, dtype=object) % params.p).astype(_U64)


def centered(x, params: FieldParams):
    """Signed representative in [-(p//2), p//2]."""
    if _is_scalar(x):
        x = int(x)
        return x - params.p if x > params.half else x
    x = as_elements(x)
    neg = x > _U64(params.half)
    mag = np.where(neg, _U64(params.p) - x, x).astype(np.int64)
    return np.where(neg, -mag, mag)


def from_signed(c, params: FieldParams):
    """Map a signed integer (or int64 array) into [0, p)."""
    if _is_scalar(c):
        return int(c) % params.p
    c = np.asarray(c, dtype=np.int64)
    mag = np.abs(c).astype(_U64)
    return np.where(c < 0, _U64(params.p) - mag, mag)


def encode_fixed(v, params: FieldParams, bits: int | None = None):
    """Encode reals as sign(v) * floor(|v| * 2**bits) embedded in the field (bits defaults to f)."""
    bits = params.f if bits is None else bits
    if np.ndim(v) == 0:
        v = float(v)
        if not math.isfinite(v):
            raise RangeError(f"cannot encode non-finite value {v}")
        scaled = math.trunc(math.ldexp(v, bits))
        if abs(scaled) >= params.half:
            raise RangeError(f"value {v} exceeds the representable range at {bits} fractional bits")
        return scaled % params.p
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise RangeError("cannot encode NaN or infinite values")
    scaled = np.trunc(np.ldexp(v, bits))
    if scaled.size and float(np.max(np.abs(scaled))) >= float(params.half):
        raise RangeError(f"values exceed the representable range at {bits} fractional bits")
    return from_signed(scaled.astype(np.int64), params)


def decode_fixed(x, params: FieldParams, bits: int | None = None):
    bits = params.f if bits is None else bits
    c = centered(x, params)
    if _is_scalar(c):
        return math.ldexp(c, -bits)
    return np.ldexp(c.astype(np.float64), -bits)


def trunc_signed(x, params: FieldParams, bits: int | None = None):
    """Drop ``bits`` fractional bits, rounding toward minus infinity on the signed value."""
    bits = params.f if bits is None else bits
    c = centered(x, params)
    if _is_scalar(c):
        return (c >> bits) % params.p
    return from_signed(c >> np.int64(bits), params)


def to_offset(x, params: FieldParams):
    """Shift centered order onto unsigned order: -(p//2) maps to 0, 0 maps to p//2."""
    return fe_add(x, params.half, params)


def from_offset(u, params: FieldParams):
    return fe_sub(u, params.half, params)
