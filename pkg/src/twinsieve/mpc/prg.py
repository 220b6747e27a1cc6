"""Length-doubling PRG for the DCF tree: fixed-key AES in Matyas-Meyer-Oseas mode.

Block j of an expansion is ``AES_{sigma_j}(seed) XOR seed`` with the public key
``sigma_j = j`` as 16 little-endian bytes. Block 0 gives the left seed and
control bit, block 1 the right ones, block 2 the two 64-bit value words.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from twinsieve.mpc.field import FieldParams

SEED_BYTES = 16
_BLOCKS = 3
_local = threading.local()


def _encryptors() -> list:
    # ECB contexts are stateless across update() calls, so one per thread is reused.
    encs = getattr(_local, "encryptors", None)
    if encs is None:
        encs = [
            Cipher(algorithms.AES(j.to_bytes(16, "little")), modes.ECB()).encryptor()
            for j in range(_BLOCKS)
        ]
        _local.encryptors = encs
    return encs


def mmo_block(seeds: np.ndarray, tweak: int) -> np.ndarray:
    data = np.ascontiguousarray(seeds, dtype=np.uint8)
    enc = _encryptors()[tweak].update(data.tobytes())
    return np.frombuffer(enc, dtype=np.uint8).reshape(data.shape) ^ data


@dataclass(frozen=True)
class Expansion:
    seed_left: np.ndarray
    t_left: np.ndarray
    value_left: np.ndarray
    seed_right: np.ndarray
    t_right: np.ndarray
    value_right: np.ndarray


def prg_expand(seeds: np.ndarray) -> Expansion:
    """Expand a ``(B, 16)`` batch of seeds into both children of a tree node."""
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.uint8))
    left = mmo_block(seeds, 0)
    right = mmo_block(seeds, 1)
    values = mmo_block(seeds, 2).view("<u8").astype(np.uint64)
    t_left = left[:, 0] & 1
    t_right = right[:, 0] & 1
    left[:, 0] &= 0xFE
    right[:, 0] &= 0xFE
    return Expansion(left, t_left, values[:, 0], right, t_right, values[:, 1])


def convert_value(words: np.ndarray, params: FieldParams) -> np.ndarray:
    return np.asarray(words, dtype=np.uint64) % np.uint64(params.p)


def convert_seed(seeds: np.ndarray, params: FieldParams) -> np.ndarray:
    """Map leaf seeds to the payload group: low 8 bytes, little-endian, mod p."""
    low = np.ascontiguousarray(np.atleast_2d(seeds)[:, :8])
    return convert_value(low.view("<u8").ravel(), params)
