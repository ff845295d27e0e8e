"""Span masking over time frames.

Each frame is selected as a span start with probability p (realized as
max(1, round(p*T)) distinct starts drawn without replacement), and every
start masks m consecutive frames, clipped at the sequence end. Spans may
overlap, so the expected fraction of masked frames is 1 - (1-p)^m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MaskPlan:
    """A concrete masking decision for one utterance."""

    length: int
    span: int
    starts: np.ndarray
    mask: np.ndarray = field(repr=False)

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    @property
    def coverage(self) -> float:
        return self.n_masked / self.length


DEFAULT_P = 0.065
DEFAULT_M = 10


def _check_params(p: float, m: int) -> None:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"start proportion must lie in (0, 1], got {p}")
    if m < 1:
        raise ValueError(f"span length must be >= 1, got {m}")


def n_starts(length: int, p: float) -> int:
    """Number of span starts for a sequence of the given length."""
    return max(1, int(round(p * length)))


def sample_mask(length: int, p: float, m: int, rng: np.random.Generator) -> MaskPlan:
    """Draw a mask plan for a sequence of `length` frames."""
    _check_params(p, m)
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    k = n_starts(length, p)
    starts = np.sort(rng.choice(length, size=k, replace=False))
    mask = np.zeros(length, dtype=bool)
    for s in starts:
        mask[s : s + m] = True
    return MaskPlan(length=length, span=m, starts=starts, mask=mask)


def expected_coverage(p: float, m: int) -> float:
    """Expected masked fraction under independent per-frame start draws."""
    _check_params(p, m)
    return 1.0 - (1.0 - p) ** m
