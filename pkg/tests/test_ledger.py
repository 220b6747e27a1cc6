"""Tests for the SQLite ledger."""

import sqlite3

import pytest

from twinsieve.errors import MaterialExhaustedError, MaterialReusedError
from twinsieve.ledger import MaterialLedger, SessionLog, db_stats, recover_db


def test_tables_created(db):
    """init_db creates both tables."""
    assert db_stats(db) == {"material_slots": 0, "query_sessions": 0}


def test_stats_on_empty_database():
    """Missing tables report -1."""
    conn = sqlite3.connect(":memory:")
    conn.row_factory = sqlite3.Row
    assert db_stats(conn) == {"material_slots": -1, "query_sessions": -1}


def test_recover_closes_open_sessions(db):
    """Sessions left mid-query are closed as aborted; finished ones are untouched."""
    log = SessionLog(db)
    log.start(b"\x01" * 16, 0)
    log.update(b"\x01" * 16, phase="iterating", slot=3)
    log.start(b"\x02" * 16, 0)
    log.finish(b"\x02" * 16, phase="done")
    actions = recover_db(db)
    assert len(actions) == 1 and "01" * 16 in actions[0] and "slot=3" in actions[0]
    row = log.get("01" * 16)
    assert row["phase"] == "aborted" and row["abort_phase"] == "iterating"
    assert row["abort_reason"] == "server restarted" and row["finished_at"] is not None
    assert log.get("02" * 16)["phase"] == "done"
    assert recover_db(db) == []


def test_recover_fresh_ledger_is_noop(db):
    """A fresh ledger has nothing to recover."""
    assert recover_db(db) == []


class TestMaterialLedger:
    def test_sequential_claims(self, db):
        """Slots are handed out in order."""
        ledger = MaterialLedger(db, "aa", capacity=3)
        assert [ledger.claim(bytes([i]) * 16) for i in range(3)] == [0, 1, 2]
        assert ledger.consumed() == 3 and ledger.remaining() == 0
        with pytest.raises(MaterialExhaustedError):
            ledger.claim(b"\x09" * 16)

    def test_explicit_slot_reuse(self, db):
        """Claiming a consumed slot fails and leaves the ledger usable."""
        ledger = MaterialLedger(db, "bb", capacity=4)
        assert ledger.claim(b"\x01" * 16, slot=2) == 2
        with pytest.raises(MaterialReusedError):
            ledger.claim(b"\x02" * 16, slot=2)
        assert ledger.claim(b"\x03" * 16) == 3
        assert ledger.remaining() == 0

    def test_bundles_are_independent(self, db):
        """Each bundle id has its own cursor."""
        first = MaterialLedger(db, "cc", capacity=2)
        second = MaterialLedger(db, "dd", capacity=2)
        first.claim(b"\x01" * 16)
        assert second.claim(b"\x02" * 16) == 0
        assert db_stats(db)["material_slots"] == 2


class TestSessionLog:
    def test_lifecycle(self, db):
        """Sessions start, update and finish with a timestamp."""
        log = SessionLog(db)
        qid = bytes(range(16))
        log.start(qid, 0)
        log.update(qid, phase="iterate", steps=3, slot=0)
        log.finish(qid, phase="done", client_bytes_in=100)
        row = log.get(qid.hex())
        assert row["phase"] == "done" and row["steps"] == 3
        assert row["client_bytes_in"] == 100
        assert row["finished_at"] is not None

    def test_unknown_column(self, db):
        """Updates are restricted to known columns."""
        log = SessionLog(db)
        log.start(b"\x00" * 16, 1)
        with pytest.raises(KeyError):
            log.update(b"\x00" * 16, party=0)

    def test_rows_newest_first(self, db):
        """rows() lists the most recent session first."""
        log = SessionLog(db)
        for i in range(3):
            log.start(bytes([i]) * 16, 0)
        rows = log.rows()
        assert [r["query_id"] for r in rows] == [(bytes([i]) * 16).hex() for i in (2, 1, 0)]
        assert len(log.rows(limit=2)) == 2
        assert log.get("ff" * 16) is None
