"""SQLite ledger: crash-safe offline-material cursor and the query-session log."""

from __future__ import annotations

import sqlite3
import threading
from pathlib import Path

from twinsieve.errors import MaterialExhaustedError, MaterialReusedError

_SCHEMA_PATH = Path(__file__).parent / "schema.sql"

SESSION_COLUMNS = (
    "phase", "steps", "abort_phase", "abort_reason", "slot", "bundle_id",
    "client_bytes_in", "client_bytes_out", "peer_bytes_in", "peer_bytes_out",
    "peer_rounds", "online_seconds", "finished_at",
)


def get_db(db_path: str | Path) -> sqlite3.Connection:
    """Return a configured SQLite connection.

    WAL journal with synchronous=FULL: a committed slot claim survives power loss.
    """
    conn = sqlite3.connect(str(db_path), timeout=10, check_same_thread=False)
    conn.row_factory = sqlite3.Row
    conn.execute("PRAGMA journal_mode=WAL")
    conn.execute("PRAGMA synchronous=FULL")
    conn.execute("PRAGMA busy_timeout=5000")
    return conn


def init_db(conn: sqlite3.Connection) -> None:
    """Create all tables from schema.sql."""
    conn.executescript(_SCHEMA_PATH.read_text())


def recover_db(conn: sqlite3.Connection) -> list[str]:
    """Close session records left open by a server that stopped mid-query.

    Their slots stay claimed. Returns one line per recovered session.
    """
    rows = conn.execute(
        "SELECT query_id, phase, slot FROM query_sessions "
        "WHERE finished_at IS NULL AND phase NOT IN ('done', 'aborted')"
    ).fetchall()
    for row in rows:
        conn.execute(
            "UPDATE query_sessions SET phase = 'aborted', abort_phase = ?, "
            "abort_reason = 'server restarted', finished_at = CURRENT_TIMESTAMP WHERE query_id = ?",
            (row["phase"], row["query_id"]),
        )
    if rows:
        conn.commit()
    return [f"Aborted session {row['query_id']} (phase={row['phase']}, slot={row['slot']})" for row in rows]


def db_stats(conn: sqlite3.Connection) -> dict[str, int]:
    """Return row counts for all tables."""
    stats = {}
    for table in ("material_slots", "query_sessions"):
        try:
            row = conn.execute(f"SELECT COUNT(*) as cnt FROM {table}").fetchone()
            stats[table] = row["cnt"]
        except sqlite3.OperationalError:
            stats[table] = -1
    return stats


class MaterialLedger:
    """Consumption cursor over the query slots of one bundle.

    Claims are committed before the caller touches the slot's material, so a
    restarted server never hands out a slot twice.
    """

    def __init__(self, conn: sqlite3.Connection, bundle_id: str, capacity: int):
        self.conn = conn
        self.bundle_id = bundle_id
        self.capacity = capacity
        self._lock = threading.Lock()

    def claim(self, query_id: bytes, slot: int | None = None) -> int:
        """Claim ``slot`` (or the next free one) for ``query_id``."""
        with self._lock:
            if slot is None:
                row = self.conn.execute(
                    "SELECT MAX(slot) AS last FROM material_slots WHERE bundle_id = ?",
                    (self.bundle_id,),
                ).fetchone()
                slot = 0 if row["last"] is None else row["last"] + 1
            if slot >= self.capacity:
                raise MaterialExhaustedError(
                    f"bundle provisions {self.capacity} queries; slot {slot} is not available"
                )
            try:
                self.conn.execute(
                    "INSERT INTO material_slots (bundle_id, slot, query_id) VALUES (?, ?, ?)",
                    (self.bundle_id, slot, query_id.hex()),
                )
                self.conn.commit()
            except sqlite3.IntegrityError as exc:
                self.conn.rollback()
                raise MaterialReusedError(f"offline slot {slot} was already consumed") from exc
            return slot

    def consumed(self) -> int:
        with self._lock:
            row = self.conn.execute(
                "SELECT COUNT(*) AS cnt FROM material_slots WHERE bundle_id = ?",
                (self.bundle_id,),
            ).fetchone()
            return row["cnt"]

    def remaining(self) -> int:
        with self._lock:
            row = self.conn.execute(
                "SELECT MAX(slot) AS last FROM material_slots WHERE bundle_id = ?",
                (self.bundle_id,),
            ).fetchone()
        last = -1 if row["last"] is None else row["last"]
        return max(self.capacity - last - 1, 0)


class SessionLog:
    """Append-only record of query sessions for audit and the stats endpoint."""

    def __init__(self, conn: sqlite3.Connection):
        self.conn = conn
        self._lock = threading.Lock()

    def start(self, query_id: bytes, party: int) -> None:
        with self._lock:
            self.conn.execute(
                "INSERT OR REPLACE INTO query_sessions (query_id, party) VALUES (?, ?)",
                (query_id.hex(), party),
            )
            self.conn.commit()

    def update(self, query_id: bytes, **fields) -> None:
        unknown = set(fields) - set(SESSION_COLUMNS)
        if unknown:
            raise KeyError(f"unknown session columns: {sorted(unknown)}")
        if not fields:
            return
        assignments = ", ".join(f"{name} = ?" for name in fields)
        with self._lock:
            self.conn.execute(
                f"UPDATE query_sessions SET {assignments} WHERE query_id = ?",
                (*fields.values(), query_id.hex()),
            )
            self.conn.commit()

    def finish(self, query_id: bytes, **fields) -> None:
        with self._lock:
            self.conn.execute(
                "UPDATE query_sessions SET finished_at = CURRENT_TIMESTAMP WHERE query_id = ?",
                (query_id.hex(),),
            )
            self.conn.commit()
        self.update(query_id, **fields)

    def rows(self, limit: int = 100) -> list[dict]:
        with self._lock:
            cursor = self.conn.execute(
                "SELECT * FROM query_sessions ORDER BY started_at DESC, rowid DESC LIMIT ?",
                (limit,),
            )
            return [dict(row) for row in cursor.fetchall()]

    def get(self, query_id: str) -> dict | None:
        with self._lock:
            row = self.conn.execute(
                "SELECT * FROM query_sessions WHERE query_id = ?", (query_id,)
            ).fetchone()
        return dict(row) if row else None
