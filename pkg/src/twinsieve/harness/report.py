"""Traffic verification against the closed-form costs, and result reporting."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

from twinsieve.client.driver import RetrievalResult
from twinsieve.mpc.gate import cmp_key_size

SHARE_HEADER = 9    # party u8 + count u64
PEER_HEADER = 13    # stage u8 + step u32 + slot u64
REFERENCE_KEY_BYTES = 4224
FRAMING_LIMIT = 0.05


@dataclass(frozen=True)
class TrafficCheck:
    term: str
    measured: int
    predicted: int
    framing: int = 0

    @property
    def passed(self) -> bool:
        return self.measured == self.predicted

    @property
    def framing_ratio(self) -> float:
        return self.framing / self.predicted if self.predicted else 0.0

    @property
    def framing_ok(self) -> bool:
        return self.framing_ratio <= FRAMING_LIMIT

    def as_dict(self) -> dict:
        return {
            "term": self.term,
            "measured": self.measured,
            "predicted": self.predicted,
            "framing": self.framing,
            "framing_ratio": round(self.framing_ratio, 5),
            "passed": self.passed,
        }


def _sum(meters, counter: str, category: str) -> int:
    return sum(getattr(m, counter)[category] for m in meters)


def verify_traffic(
    result: RetrievalResult, m: int, n: int = 64, lam: int = 128, server_peer: dict | None = None
) -> list[TrafficCheck]:
    """Compare measured counters with the predicted per-term volumes.

    ``server_peer`` is one server's peer-meter snapshot for the same query; the
    intra-server term is checked only when it is given.
    """
    meters = result.meters
    N = result.N
    checks = []

    frames = _sum(meters, "sent_frames", "PROMPT_SHARE")
    payload = _sum(meters, "sent_payload", "PROMPT_SHARE")
    wire = _sum(meters, "sent_bytes", "PROMPT_SHARE")
    values = payload - SHARE_HEADER * frames
    checks.append(TrafficCheck("prompt_upload", values, 2 * 8 * m, wire - values))

    frames = _sum(meters, "received_frames", "DC_SHARE")
    payload = _sum(meters, "received_payload", "DC_SHARE")
    wire = _sum(meters, "received_bytes", "DC_SHARE")
    values = payload - SHARE_HEADER * frames
    checks.append(TrafficCheck("candidate_return", values, 2 * 8 * N, wire - values))

    key_payload = _sum(meters, "sent_payload", "ITER_KEY")
    key_wire = _sum(meters, "sent_bytes", "ITER_KEY")
    checks.append(TrafficCheck(
        "iteration_keys", key_payload, 2 * cmp_key_size(n, lam) * result.keys_sent, key_wire - key_payload
    ))

    if server_peer is not None:
        category = "PEER_OPEN_BATCH:ITERATE"
        sent = server_peer["sent"].get(category, {"bytes": 0, "payload": 0, "frames": 0})
        received = server_peer["received"].get(category, {"bytes": 0, "payload": 0, "frames": 0})
        values = sent["payload"] + received["payload"] - PEER_HEADER * (sent["frames"] + received["frames"])
        wire = sent["bytes"] + received["bytes"]
        checks.append(TrafficCheck("iteration_peer", values, 2 * 8 * N * result.keys_sent, wire - values))

    expected_rtt = result.keys_sent if result.stopped_by == "step-cap" else result.iterations + 1
    checks.append(TrafficCheck("rtt", result.rtt, expected_rtt))
    return checks


def key_bytes_per_iteration(n: int = 64, lam: int = 128) -> dict:
    """This implementation's per-iteration upload next to the reference constant."""
    return {"twinsieve": 2 * cmp_key_size(n, lam), "reference": REFERENCE_KEY_BYTES}


@dataclass
class OracleReport:
    """Per-query harness rows with recall, counts and traffic verdicts."""

    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    @property
    def min_recall(self) -> float:
        return min((r["recall"] for r in self.rows), default=1.0)

    def as_text(self) -> str:
        """One machine-readable ``key=value`` line per row."""
        return "\n".join(" ".join(f"{k}={v}" for k, v in row.items()) for row in self.rows)

    def table(self) -> str:
        header = f"{'N':>9} {'m':>5} {'k_prime':>7} {'count':>6} {'S':>3} {'S_exp':>5} {'rtt':>4} " \
                 f"{'recall':>7} {'up_bytes':>11} {'down_bytes':>11} {'server_s':>9}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r['N']:>9} {r['m']:>5} {r['k_prime']:>7} {r['count']:>6} {r['iterations']:>3} "
                f"{r['expected_iterations']:>5} {r['rtt']:>4} {r['recall']:>7.3f} "
                f"{r['bytes_up']:>11} {r['bytes_down']:>11} {r['server_seconds']:>9.3f}"
            )
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = list(self.rows[0]) if self.rows else []
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
        return str(path)

    def as_dict(self) -> dict:
        return {"rows": [dict(r) for r in self.rows], "min_recall": self.min_recall}


def check_summary(checks: list[TrafficCheck]) -> dict:
    return {c.term: asdict(c) | {"passed": c.passed, "framing_ok": c.framing_ok} for c in checks}
