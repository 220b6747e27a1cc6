"""Deterministic synthetic embeddings with controllable distance structure."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from twinsieve.errors import UsageError

LAYOUTS = ("random", "uniform")


@dataclass
class SynthDataset:
    embeddings: np.ndarray       # (N, m), unit rows
    prompt: np.ndarray           # (m,), unit
    layout: str
    seed: int
    planted: list[int] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.embeddings.shape[0]

    @property
    def m(self) -> int:
        return self.embeddings.shape[1]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_dataset(
    N: int,
    m: int,
    seed: int = 7,
    *,
    layout: str = "random",
    duplicates: int = 0,
) -> SynthDataset:
    """Generate N unit vectors plus a unit prompt.

    ``random`` draws isotropic Gaussian directions. ``uniform`` places the
    documents so their cosines with the prompt are the centres of N equal bins
    of (-1, 1) in random order, so every bisection step halves the count.
    ``duplicates`` copies one document that many extra times (exact ties).
    """
    if N < 1 or m < 2:
        raise UsageError(f"synthetic data needs N >= 1 and m >= 2, got N={N} m={m}")
    if layout not in LAYOUTS:
        raise UsageError(f"unknown layout {layout!r}; choose from {', '.join(LAYOUTS)}")
    if duplicates < 0 or duplicates >= N:
        raise UsageError(f"cannot plant {duplicates} duplicates among {N} documents")

    gen = np.random.default_rng(seed)
    prompt = _unit_rows(gen.standard_normal(m))

    if layout == "random":
        embeddings = _unit_rows(gen.standard_normal((N, m)))
    else:
        cosines = -1.0 + (2.0 * np.arange(N) + 1.0) / N
        gen.shuffle(cosines)
        noise = gen.standard_normal((N, m))
        noise -= np.outer(noise @ prompt, prompt)
        directions = _unit_rows(noise)
        embeddings = cosines[:, None] * prompt[None, :] + np.sqrt(1.0 - cosines**2)[:, None] * directions
        embeddings = _unit_rows(embeddings)

    planted: list[int] = []
    if duplicates:
        rows = gen.choice(N, size=duplicates + 1, replace=False)
        embeddings[rows[1:]] = embeddings[rows[0]]
        planted = sorted(int(r) for r in rows)
    return SynthDataset(embeddings, prompt, layout, seed, planted)
