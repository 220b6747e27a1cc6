"""Data-owner ingestion: encode, share and store the document embeddings.

Share database layout (little-endian)::

    magic "TSDB" | version u16 | party u8 | p u64 | f u8 | f_doc u8 | n u8 | m u32 | N u64 | l u64
    share matrix N x m (u64) | document-mask differences N x m (u64) | SHA-256 of all preceding bytes
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from twinsieve.errors import IngestError
from twinsieve.mpc.dot import precompute_doc_masks
from twinsieve.mpc.field import FieldParams, encode_fixed
from twinsieve.mpc.shares import Share, share

logger = logging.getLogger(__name__)

DB_MAGIC = b"TSDB"
DB_VERSION = 1
_DB_HEADER = struct.Struct("<4sHBQBBBIQQ")
_DIGEST = 32


@dataclass
class PublicMetadata:
    """Public deployment facts the user needs: sizes, field and the document norm."""

    N: int
    m: int
    p: int
    f: int
    f_doc: int
    n: int
    lam: int
    l: int  # noqa: E741
    truncate_bits: int = 0

    @property
    def distance_bound(self) -> int:
        """Largest distance magnitude of two unit vectors, in distance units."""
        return 2 ** (self.f + self.f_doc - self.truncate_bits)

    def field_params(self) -> FieldParams:
        return FieldParams(p=self.p, f=self.f, n=self.n, f_doc=self.f_doc, lam=self.lam)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(asdict(self), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> PublicMetadata:
        from dacite import from_dict

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Public metadata not found: {path}")
        return from_dict(data_class=cls, data=yaml.safe_load(path.read_text()) or {})


@dataclass
class ShareDatabase:
    """One server's share of the document matrix plus the public mask differences."""

    party: int
    params: FieldParams
    shares: np.ndarray
    doc_diffs: np.ndarray

    @property
    def N(self) -> int:
        return self.shares.shape[0]

    @property
    def m(self) -> int:
        return self.shares.shape[1]

    @property
    def norm(self) -> int:
        return 2**self.params.f_doc

    def _header(self) -> bytes:
        p = self.params
        return _DB_HEADER.pack(
            DB_MAGIC, DB_VERSION, self.party, p.p, p.f, p.f_doc, p.n, self.m, self.N, self.norm
        )

    def save(self, path: str | Path) -> None:
        digest = hashlib.sha256()
        with open(path, "wb") as fh:
            for chunk in (
                self._header(),
                np.ascontiguousarray(self.shares, dtype="<u8").tobytes(),
                np.ascontiguousarray(self.doc_diffs, dtype="<u8").tobytes(),
            ):
                digest.update(chunk)
                fh.write(chunk)
            fh.write(digest.digest())

    @classmethod
    def load(cls, path: str | Path, party: int | None = None) -> ShareDatabase:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Share database not found: {path}")
        raw = path.read_bytes()
        if len(raw) < _DB_HEADER.size + _DIGEST:
            raise IngestError(f"{path} is too short to be a share database")
        if hashlib.sha256(raw[:-_DIGEST]).digest() != raw[-_DIGEST:]:
            raise IngestError(f"{path} failed its integrity checksum")
        magic, version, db_party, p, f, f_doc, n, m, N, _norm = _DB_HEADER.unpack_from(raw)
        if magic != DB_MAGIC or version != DB_VERSION:
            raise IngestError(f"{path} is not a version {DB_VERSION} share database")
        if party is not None and db_party != party:
            raise IngestError(f"{path} belongs to party {db_party}, not party {party}")
        if len(raw) != _DB_HEADER.size + 16 * N * m + _DIGEST:
            raise IngestError(f"{path} size does not match N={N} m={m}")
        body = np.frombuffer(raw, dtype="<u8", count=2 * N * m, offset=_DB_HEADER.size).astype(np.uint64)
        params = FieldParams(p=p, f=f, n=n, f_doc=f_doc)
        return cls(db_party, params, body[: N * m].reshape(N, m), body[N * m:].reshape(N, m))


def check_rows(
    embeddings: np.ndarray, renormalize: bool = False, tolerance: float = 1e-3
) -> np.ndarray:
    """Validate (or renormalize) rows to unit length."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise IngestError(f"embeddings must be a non-empty N x m matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise IngestError("embeddings contain NaN or infinite values")
    norms = np.linalg.norm(x, axis=1)
    off = np.abs(norms - 1.0) > tolerance
    if np.any(off):
        if not renormalize:
            first = int(np.argmax(off))
            raise IngestError(
                f"{int(off.sum())} rows are not unit-norm (row {first} has norm {norms[first]:.6f}); "
                "pass renormalize to rescale them"
            )
        if np.any(norms == 0):
            raise IngestError("cannot renormalize an all-zero row")
        x = x / norms[:, None]
    return x


def ingest(
    embeddings: np.ndarray,
    params: FieldParams,
    rng,
    doc_masks: tuple[np.ndarray, np.ndarray],
    renormalize: bool = False,
    tolerance: float = 1e-3,
    truncate_bits: int = 0,
) -> tuple[ShareDatabase, ShareDatabase, PublicMetadata]:
    """Encode at ``f_doc`` fractional bits, share, and open the document masks.

    ``doc_masks`` are both parties' shares of the dealer's static document masks.
    """
    x = check_rows(embeddings, renormalize, tolerance)
    N, m = x.shape
    params.check_capacity(N)
    for mask in doc_masks:
        if mask.shape != (N, m):
            raise IngestError(f"dealer document masks {mask.shape} do not match embeddings {(N, m)}")

    encoded = encode_fixed(x, params, bits=params.f_doc)
    s0, s1 = share(encoded, params, rng)
    diffs = precompute_doc_masks((s0, s1), (Share(0, doc_masks[0]), Share(1, doc_masks[1])), params)
    meta = PublicMetadata(
        N=N, m=m, p=params.p, f=params.f, f_doc=params.f_doc, n=params.n, lam=params.lam, l=2**params.f_doc,
        truncate_bits=truncate_bits,
    )
    logger.info("ingest: N=%d m=%d f_doc=%d", N, m, params.f_doc)
    return (
        ShareDatabase(0, params, s0.value, diffs),
        ShareDatabase(1, params, s1.value, diffs.copy()),
        meta,
    )


def _shape_path(path: Path) -> Path:
    return path.with_name(path.name + ".shape")


def write_embeddings(path: str | Path, matrix: np.ndarray) -> None:
    """Raw little-endian float64 matrix plus a ``<file>.shape`` sidecar holding ``N m``."""
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(matrix, dtype="<f8"))
    path.write_bytes(matrix.tobytes())
    _shape_path(path).write_text(f"{matrix.shape[0]} {matrix.shape[1]}\n")


def read_embeddings(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Embeddings file not found: {path}")
    if path.suffix in (".csv", ".txt"):
        return np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, ndmin=2)
    sidecar = _shape_path(path)
    if not sidecar.exists():
        raise IngestError(f"missing shape sidecar {sidecar}")
    try:
        N, m = (int(v) for v in sidecar.read_text().split())
    except ValueError as exc:
        raise IngestError(f"malformed shape sidecar {sidecar}") from exc
    data = np.fromfile(path, dtype="<f8")
    if data.size != N * m:
        raise IngestError(f"{path} holds {data.size} values, sidecar says {N}x{m}")
    return data.reshape(N, m).astype(np.float64)


def read_vector(path: str | Path) -> np.ndarray:
    """Prompt embedding: raw float64 (any sidecar ignored) or a text list."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Embedding file not found: {path}")
    if path.suffix in (".csv", ".txt"):
        text = path.read_text().replace(",", " ")
        return np.array([float(v) for v in text.split()], dtype=np.float64)
    return np.fromfile(path, dtype="<f8").astype(np.float64)


def convert_csv(csv_path: str | Path, out_path: str | Path) -> tuple[int, int]:
    """Convert comma-separated rows into the raw matrix format."""
    matrix = np.loadtxt(csv_path, delimiter=",", ndmin=2)
    write_embeddings(out_path, matrix)
    return matrix.shape
