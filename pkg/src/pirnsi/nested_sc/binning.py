"""Nested random binning with an exhaustive maximum-likelihood decoder.

Only usable for short blocks: decoding scans all 2^n candidates.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..channels import ChannelSpec
from ..errors import ParameterError
from .rates import RateAllocation

MAX_NSRC = 20


def _check_n(n: int) -> None:
    if not 1 <= n <= MAX_NSRC:
        raise ParameterError(f"binning backend supports 1 <= n_src <= {MAX_NSRC}, got {n}")


@lru_cache(maxsize=64)
def _table(seed: int, level: int, m: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([seed, level, 0xB1])
    t = rng.integers(0, 1 << m, size=1 << n, dtype=np.int64)
    t.setflags(write=False)
    return t


@lru_cache(maxsize=8)
def _candidates(n: int) -> np.ndarray:
    c = ((np.arange(1 << n)[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.uint8)
    c.setflags(write=False)
    return c


def _to_int(bits) -> int:
    v = 0
    for b in np.asarray(bits).tolist():
        v = (v << 1) | int(b)
    return v


def _to_bits(v: int, m: int) -> np.ndarray:
    return np.array([(v >> (m - 1 - i)) & 1 for i in range(m)], dtype=np.uint8)


def rb_encode(x, alloc: RateAllocation, seed: int) -> tuple[np.ndarray, ...]:
    x = np.asarray(x)
    _check_n(alloc.n_src)
    if x.size != alloc.n_src:
        raise ParameterError(f"block length {x.size} != n_src {alloc.n_src}")
    ix = _to_int(x)
    return tuple(_to_bits(int(_table(seed, l + 1, m, alloc.n_src)[ix]), m)
                 for l, m in enumerate(alloc.m))


def rb_decode(level: int, bins, y, alloc: RateAllocation, seed: int,
              channel: ChannelSpec) -> np.ndarray | None:
    """ML estimate among candidates matching bins 1..level; None on ties or no match."""
    n = alloc.n_src
    _check_n(n)
    y = np.asarray(y, dtype=np.int64)
    mask = np.ones(1 << n, dtype=bool)
    for l in range(1, level + 1):
        m = alloc.m[l - 1]
        if m:
            mask &= _table(seed, l, m, n) == _to_int(bins[l - 1])
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return None
    cand = _candidates(n)[idx]
    with np.errstate(divide="ignore"):
        logW = np.log(channel.W())
    ll = logW[cand, y[None, :]].sum(axis=1)
    best = ll.max()
    if not np.isfinite(best):
        return None
    winners = np.flatnonzero(ll >= best - 1e-9)
    if winners.size != 1:
        return None
    return cand[winners[0]].copy()
