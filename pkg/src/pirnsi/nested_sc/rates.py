"""Per-level bin-index sizes from the cumulative targets H(X|Y_l) + delta."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from ..channels import ChannelBank, as_fraction
from ..errors import ParameterError


@dataclass(frozen=True)
class RateAllocation:
    n_src: int
    delta: Fraction
    m: tuple[int, ...]  # bits of the level-l index
    cumulative: tuple[int, ...]  # sum_{i<=l} m_i
    targets: tuple[Fraction, ...]  # H(X|Y_l) + delta

    @property
    def D(self) -> int:
        return len(self.m)

    def rate(self, level: int) -> Fraction:
        """R_l = m_l / n_src (1-based level)."""
        return Fraction(self.m[level - 1], self.n_src)


def allocate_rates(bank: ChannelBank, delta, n_src: int) -> RateAllocation:
    delta = as_fraction(delta)
    if delta < 0:
        raise ParameterError("delta must be non-negative")
    if n_src < 1:
        raise ParameterError("n_src must be >= 1")
    h = [as_fraction(e) for e in bank.entropies]
    if any(h[i] > h[i + 1] for i in range(len(h) - 1)):
        raise ParameterError("channel bank is not ordered by conditional entropy")
    targets = tuple(e + delta for e in h)
    # Cap at n_src: a level never needs more bits than the raw block.
    cum = tuple(min(n_src, math.ceil(n_src * t)) for t in targets)
    m = tuple(c - p for c, p in zip(cum, (0,) + cum[:-1]))
    return RateAllocation(n_src, delta, m, cum, targets)
