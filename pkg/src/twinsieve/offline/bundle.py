"""Offline bundle file format and the per-party read view.

Layout (all integers little-endian)::

    magic "P2RG" | version u16 | party u8 | parameter block | bundle id (16 bytes)
    section count u32 | sections: kind u16, query u32, offset u64, length u64
    SHA-256 of everything above | section payloads

Sections hold the static document masks and, per provisioned query, the prompt
masks, the product masks, N binary-check gate keys and one count-bound gate key.
"""

from __future__ import annotations

import hashlib
import sqlite3
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from twinsieve.errors import CorruptBundleError, MaterialExhaustedError, WrongPartyError
from twinsieve.ledger import MaterialLedger
from twinsieve.mpc.dot import DotCorrelation
from twinsieve.mpc.field import FieldParams
from twinsieve.mpc.gate import CmpKey, cmp_key_dtype, cmp_key_from_records, cmp_key_size

MAGIC = b"P2RG"
VERSION = 1
STATIC_QUERY = 0xFFFFFFFF

_PREFIX = struct.Struct("<4sHB")
_PARAMS = struct.Struct("<QBBBHIQQIQI")
_COUNT = struct.Struct("<I")
_ENTRY = struct.Struct("<HIQQ")
_DIGEST = 32


class Section(IntEnum):
    DOC_MASK = 1
    PROMPT_MASK = 2
    PRODUCT_MASK = 3
    BINARY_KEYS = 4
    COUNT_KEY = 5


@dataclass(frozen=True)
class BundleHeader:
    party: int
    params: FieldParams
    m: int
    N: int
    c_m: int
    step_m: int
    xi: int
    queries: int
    bundle_id: bytes

    def pack_params(self) -> bytes:
        p = self.params
        return _PARAMS.pack(
            p.p, p.f, p.f_doc, p.n, p.lam, self.m, self.N, self.c_m, self.step_m, self.xi, self.queries
        )


def section_lengths(header: BundleHeader) -> list[tuple[Section, int, int]]:
    """(kind, query, byte length) of every section in file order."""
    key = cmp_key_size(header.params.n, header.params.lam)
    nm = 8 * header.N * header.m
    sections = [(Section.DOC_MASK, STATIC_QUERY, nm)]
    for q in range(header.queries):
        sections += [
            (Section.PROMPT_MASK, q, 8 * header.m),
            (Section.PRODUCT_MASK, q, nm),
            (Section.BINARY_KEYS, q, header.N * key),
            (Section.COUNT_KEY, q, key),
        ]
    return sections


def header_bytes(header: BundleHeader) -> bytes:
    """Serialized header, section table and digest; payloads follow directly."""
    sections = section_lengths(header)
    prefix = (
        _PREFIX.pack(MAGIC, VERSION, header.party)
        + header.pack_params()
        + header.bundle_id
        + _COUNT.pack(len(sections))
    )
    offset = len(prefix) + _ENTRY.size * len(sections) + _DIGEST
    table = b""
    for kind, query, length in sections:
        table += _ENTRY.pack(int(kind), query, offset, length)
        offset += length
    body = prefix + table
    return body + hashlib.sha256(body).digest()


def bundle_size(header: BundleHeader) -> int:
    return len(header_bytes(header)) + sum(length for _, _, length in section_lengths(header))


@dataclass(frozen=True)
class QueryMaterial:
    """Everything one server consumes for one query session."""

    slot: int
    correlation: DotCorrelation
    binary_keys: CmpKey
    count_key: CmpKey


@dataclass
class OfflineBundle:
    """Read-only, memory-mapped view of one party's bundle."""

    path: Path
    header: BundleHeader
    table: dict[tuple[int, int], tuple[int, int]]
    data: np.memmap
    ledger: MaterialLedger | None = field(default=None, repr=False)

    @property
    def party(self) -> int:
        return self.header.party

    @property
    def params(self) -> FieldParams:
        return self.header.params

    @property
    def capacity(self) -> int:
        return self.header.queries

    @property
    def bundle_id(self) -> str:
        return self.header.bundle_id.hex()

    def _section(self, kind: Section, query: int = STATIC_QUERY) -> np.ndarray:
        try:
            offset, length = self.table[(int(kind), query)]
        except KeyError as exc:
            raise CorruptBundleError(f"bundle lacks section {kind.name} for query {query}") from exc
        return self.data[offset:offset + length]

    def _elements(self, kind: Section, query: int, shape: tuple[int, ...]) -> np.ndarray:
        raw = self._section(kind, query)
        return raw.view("<u8").reshape(shape).astype(np.uint64)

    def doc_mask(self) -> np.ndarray:
        return self._elements(Section.DOC_MASK, STATIC_QUERY, (self.header.N, self.header.m))

    def material(self, slot: int) -> QueryMaterial:
        """Material of ``slot`` without touching the cursor."""
        h = self.header
        if not 0 <= slot < h.queries:
            raise MaterialExhaustedError(f"slot {slot} outside the {h.queries} provisioned queries")
        dtype = cmp_key_dtype(h.params.n)
        correlation = DotCorrelation(
            party=h.party,
            prompt_mask=self._elements(Section.PROMPT_MASK, slot, (h.m,)),
            product_mask=self._elements(Section.PRODUCT_MASK, slot, (h.N, h.m)),
            doc_mask=self.doc_mask(),
        )
        binary = cmp_key_from_records(self._section(Section.BINARY_KEYS, slot).view(dtype), h.params)
        count = cmp_key_from_records(self._section(Section.COUNT_KEY, slot).view(dtype), h.params)
        if binary.party != h.party or count.party != h.party:
            raise CorruptBundleError(f"slot {slot} holds keys for another party")
        return QueryMaterial(slot, correlation, binary, count)

    def claim(self, query_id: bytes, slot: int | None = None) -> QueryMaterial:
        """Persistently claim a slot, then return its material."""
        if self.ledger is None:
            raise MaterialExhaustedError("bundle opened without a consumption ledger")
        return self.material(self.ledger.claim(query_id, slot))


def read_header(raw: bytes | np.ndarray) -> tuple[BundleHeader, int]:
    """Parse the fixed header; returns it with the declared section count."""
    raw = bytes(raw[: _PREFIX.size + _PARAMS.size + 16 + _COUNT.size])
    if len(raw) < _PREFIX.size + _PARAMS.size + 16 + _COUNT.size:
        raise CorruptBundleError("bundle shorter than its fixed header")
    magic, version, party = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptBundleError(f"bad bundle magic {magic!r}")
    if version != VERSION:
        raise CorruptBundleError(f"unsupported bundle version {version}")
    p, f, f_doc, n, lam, m, N, c_m, step_m, xi, queries = _PARAMS.unpack_from(raw, _PREFIX.size)
    offset = _PREFIX.size + _PARAMS.size
    bundle_id = raw[offset:offset + 16]
    (count,) = _COUNT.unpack_from(raw, offset + 16)
    try:
        params = FieldParams(p=p, f=f, n=n, f_doc=f_doc, lam=lam)
    except ValueError as exc:
        raise CorruptBundleError(f"bundle parameter block is invalid: {exc}") from exc
    header = BundleHeader(party, params, m, N, c_m, step_m, xi, queries, bundle_id)
    return header, count


def bundle_load(path: str | Path, party: int, ledger_conn: sqlite3.Connection | None = None) -> OfflineBundle:
    """Open, validate and memory-map a bundle for ``party``.

    With ``ledger_conn`` the view can claim slots through a persistent cursor.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Bundle not found: {path}")
    if path.stat().st_size == 0:
        raise CorruptBundleError(f"{path} is empty")
    data = np.memmap(path, dtype=np.uint8, mode="r")
    header, count = read_header(data)
    if header.party != party:
        raise WrongPartyError(f"{path} belongs to party {header.party}, not party {party}")

    start = _PREFIX.size + _PARAMS.size + 16 + _COUNT.size
    end = start + count * _ENTRY.size
    if data.size < end + _DIGEST:
        raise CorruptBundleError("bundle truncated inside its section table")
    body = bytes(data[:end])
    if hashlib.sha256(body).digest() != bytes(data[end:end + _DIGEST]):
        raise CorruptBundleError("bundle header checksum mismatch")
    if body + bytes(data[end:end + _DIGEST]) != header_bytes(header):
        raise CorruptBundleError("bundle section table does not match its parameters")

    table: dict[tuple[int, int], tuple[int, int]] = {}
    for i in range(count):
        kind, query, offset, length = _ENTRY.unpack_from(body, start + i * _ENTRY.size)
        if offset + length > data.size:
            raise CorruptBundleError(f"section {kind} for query {query} runs past the end of the file")
        table[(kind, query)] = (offset, length)

    ledger = None
    if ledger_conn is not None:
        ledger = MaterialLedger(ledger_conn, header.bundle_id.hex(), header.queries)
    return OfflineBundle(path, header, table, data, ledger)
