"""Distance-threshold bisection and leakage accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from twinsieve.errors import ConfigurationError, UsageError


@dataclass(frozen=True)
class BisectState:
    """Threshold search state in signed fixed-point distance units."""

    d_l: int
    d_k: int
    d_r: int
    k: int
    xi: int
    step: int = 0
    history: tuple[tuple[int, int], ...] = field(default=())  # (threshold, count) per received count
    stopped: bool = False

    @classmethod
    def initial(cls, bound: int, k: int, xi: int) -> BisectState:
        """Start at ``d_k = 0`` inside ``[-bound, bound]``."""
        check_limits(k, xi)
        if bound < 1:
            raise UsageError(f"distance bound must be positive, got {bound}")
        return cls(d_l=-bound, d_k=0, d_r=bound, k=k, xi=xi)

    @property
    def converged(self) -> bool:
        """No further midpoint can move the threshold."""
        return self.d_r - self.d_l <= 1

    @property
    def last_count(self) -> int | None:
        return self.history[-1][1] if self.history else None


def check_limits(k: int, xi: int) -> None:
    if k < 1:
        raise ConfigurationError(f"k must be at least 1, got {k}")
    if xi < 0:
        raise ConfigurationError(f"xi must be non-negative, got {xi}")
    if xi > k:
        raise ConfigurationError(f"xi={xi} exceeds k={k}; the slack may not exceed k")


def bisect_step(state: BisectState, c: int) -> BisectState:
    """Apply one received count; the result is ``stopped`` when ``0 <= c - k <= xi``."""
    if c < 0:
        raise UsageError(f"count must be non-negative, got {c}")
    history = state.history + ((state.d_k, c),)
    if 0 <= c - state.k <= state.xi:
        return replace(state, step=state.step + 1, history=history, stopped=True)
    if c > state.k:
        d_l, d_r = state.d_k, state.d_r
    else:
        d_l, d_r = state.d_l, state.d_k
    return replace(state, d_l=d_l, d_r=d_r, d_k=(d_l + d_r) // 2, step=state.step + 1, history=history)


@dataclass(frozen=True)
class LeakageReport:
    counts_received: int
    N: int
    physical_bits: float
    bound_bits: float
    functional_documents: int

    def as_dict(self) -> dict:
        return {
            "counts_received": self.counts_received,
            "physical_bits": round(self.physical_bits, 3),
            "bound_bits": round(self.bound_bits, 3),
            "functional_documents": self.functional_documents,
        }


def leakage_bits(counts: int, N: int) -> float:
    return counts * math.log2(N + 1)


def iteration_bound(N: int, k: int, xi: int) -> int:
    """Iterations a converged run may need: ceil(log2(N / (k + xi)))."""
    return max(math.ceil(math.log2(N / (k + xi))), 0)


def leakage_report(counts_received: int, N: int, k: int, xi: int, delivered: int) -> LeakageReport:
    """Each count is one value in ``[0, N]``; the delivered set leaks at most ``k + xi`` documents."""
    return LeakageReport(
        counts_received=counts_received,
        N=N,
        physical_bits=leakage_bits(counts_received, N),
        bound_bits=leakage_bits(iteration_bound(N, k, xi), N),
        functional_documents=delivered,
    )
