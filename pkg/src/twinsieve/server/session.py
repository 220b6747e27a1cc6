"""Per-query server state."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from twinsieve.errors import ProtocolError
from twinsieve.net.wire import TrafficMeter
from twinsieve.offline.bundle import QueryMaterial


class Phase(str, Enum):
    INIT = "init"
    ITERATING = "iterating"
    FINALIZING = "finalizing"
    DONE = "done"
    ABORTED = "aborted"


_TRANSITIONS = {
    Phase.INIT: {Phase.ITERATING, Phase.ABORTED},
    Phase.ITERATING: {Phase.ITERATING, Phase.FINALIZING, Phase.ABORTED},
    Phase.FINALIZING: {Phase.DONE, Phase.ABORTED},
    Phase.DONE: set(),
    Phase.ABORTED: set(),
}


@dataclass
class QuerySession:
    query_id: bytes
    party: int
    phase: Phase = Phase.INIT
    slot: int | None = None
    material: QueryMaterial | None = field(default=None, repr=False)
    distances: np.ndarray | None = field(default=None, repr=False)   # offset-shifted shares of d_j
    candidates: np.ndarray | None = field(default=None, repr=False)  # shares of d_c
    step: int = 0
    counts_sent: int = 0
    client_meter: TrafficMeter = field(default_factory=TrafficMeter, repr=False)
    peer_meter: TrafficMeter = field(default_factory=TrafficMeter, repr=False)
    online_seconds: float = 0.0
    started: float = field(default_factory=time.monotonic)
    abort_phase: str | None = None
    abort_reason: str | None = None
    busy: bool = field(default=False, repr=False)

    @property
    def hex_id(self) -> str:
        return self.query_id.hex()

    @property
    def finished(self) -> bool:
        return self.phase in (Phase.DONE, Phase.ABORTED)

    def transition(self, target: Phase) -> None:
        if target not in _TRANSITIONS[self.phase]:
            raise ProtocolError(f"session {self.hex_id} cannot move from {self.phase.value} to {target.value}")
        self.phase = target

    def release(self) -> None:
        """Drop secret-shared state once the session can no longer use it."""
        self.material = None
        self.distances = None
        self.candidates = None

    def summary(self) -> dict:
        return {
            "query_id": self.hex_id,
            "party": self.party,
            "phase": self.phase.value,
            "slot": self.slot,
            "steps": self.step,
            "counts_sent": self.counts_sent,
            "online_seconds": round(self.online_seconds, 6),
            "abort_phase": self.abort_phase,
            "abort_reason": self.abort_reason,
            "client": self.client_meter.snapshot(),
            "peer": self.peer_meter.snapshot(),
        }
