"""Cryptographically secure randomness: an AES-CTR keystream, optionally seeded."""

from __future__ import annotations

import hashlib
import os

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes


def _seed_bytes(seed: bytes | str | int) -> bytes:
    if isinstance(seed, bytes):
        return seed
    if isinstance(seed, int):
        return seed.to_bytes((seed.bit_length() + 8) // 8, "little", signed=True)
    return seed.encode()


class SecureRandom:
    """Keystream generator used for shares, masks and DCF seeds.

    Without a seed the key comes from ``os.urandom``; a seed makes the stream
    reproducible, which the dealer relies on for byte-identical bundles.
    """

    def __init__(self, seed: bytes | str | int | None = None):
        if seed is None:
            key = os.urandom(32)
        else:
            key = hashlib.sha256(b"twinsieve-rng" + _seed_bytes(seed)).digest()
        self._stream = Cipher(algorithms.AES(key), modes.CTR(b"\x00" * 16)).encryptor()

    def bytes(self, count: int) -> bytes:
        return self._stream.update(b"\x00" * count)

    def uint64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.bytes(8 * count), dtype="<u8").astype(np.uint64)

    def bits(self, count: int) -> np.ndarray:
        return (np.frombuffer(self.bytes(count), dtype=np.uint8) & 1).astype(np.uint8)

    def seeds(self, count: int, width: int = 16) -> np.ndarray:
        return np.frombuffer(self.bytes(count * width), dtype=np.uint8).reshape(count, width).copy()

    def field(self, p: int, size: int | tuple[int, ...] | None = None):
        """Uniform elements of [0, p) by rejection sampling on 64-bit words."""
        count = 1 if size is None else int(np.prod(size))
        rem = 2**64 % p
        limit = np.uint64(2**64 - rem) if rem else None
        parts: list[np.ndarray] = []
        have = 0
        while have < count:
            need = count - have
            draw = self.uint64(need + need // 8 + 8)
            if limit is not None:
                draw = draw[draw < limit]
            parts.append(draw)
            have += draw.size
        out = np.concatenate(parts)[:count] % np.uint64(p)
        if size is None:
            return int(out[0])
        return out.reshape(size)
