"""Nested polar source codes with successive-cancellation decoding.

Convention: u = x G_N with G_N = F^{(x)n}, F = [[1,0],[1,1]], no bit reversal.
The first half of u depends on x_a ^ x_b, the second half on x_b.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..channels import ERASURE, ChannelSpec
from ..errors import ParameterError

BEC_LLR = 200.0  # magnitude used for unerased BEC observations


def _log2n(N: int) -> int:
    if N < 1 or N & (N - 1):
        raise ParameterError(f"block length {N} is not a power of two")
    return N.bit_length() - 1


def polar_transform(x) -> np.ndarray:
    """x G_N over GF(2) along the last axis. G_N is an involution."""
    u = np.array(x, dtype=np.uint8, copy=True)
    N = u.shape[-1]
    _log2n(N)
    lead = u.shape[:-1]
    h = N // 2
    while h >= 1:
        v = u.reshape(lead + (-1, 2, h))
        v[..., 0, :] ^= v[..., 1, :]
        h //= 2
    return u


def bec_profile(eps: float, N: int) -> np.ndarray:
    """Exact H(U_i | U^{i-1}, Y^N) for BEC(eps) via z- = 2z - z^2, z+ = z^2."""
    z = np.array([float(eps)])
    for _ in range(_log2n(N)):
        z = np.stack([2 * z - z * z, z * z], axis=1).reshape(-1)
    return z


def channel_llr(channel: ChannelSpec, y) -> np.ndarray:
    """log P(x=0|y) / P(x=1|y) under uniform input."""
    y = np.asarray(y, dtype=np.int64)
    if channel.kind == "bec":
        return np.where(y == ERASURE, 0.0, np.where(y == 0, BEC_LLR, -BEC_LLR))
    if not channel.is_binary:
        raise ParameterError("polar backend needs a binary-input channel")
    W = channel.W()
    with np.errstate(divide="ignore"):
        t = np.log(W[0]) - np.log(W[1])
    return np.clip(t, -BEC_LLR, BEC_LLR)[y]


def _f(a, b):
    """Exact check-node LLR combination (boxplus)."""
    aa, bb = np.abs(a), np.abs(b)
    lo = np.minimum(aa, bb)
    # tanh form is accurate for small inputs; the log1p form avoids saturation.
    with np.errstate(divide="ignore", invalid="ignore"):
        small = 2.0 * np.arctanh(np.tanh(aa / 2) * np.tanh(bb / 2))
    big = lo + np.log1p(np.exp(-(aa + bb))) - np.log1p(np.exp(-np.abs(aa - bb)))
    return np.sign(a) * np.sign(b) * np.where(lo < 15.0, small, big)


def _genie_leaf_llrs(L: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Leaf LLRs of SC when every earlier bit is supplied by a genie. Batched on axis 0."""
    n = L.shape[1]
    if n == 1:
        return L
    h = n // 2
    La, Lb = L[:, :h], L[:, h:]
    left = _genie_leaf_llrs(_f(La, Lb), u[:, :h])
    ca = polar_transform(u[:, :h])
    right = _genie_leaf_llrs(Lb + (1.0 - 2.0 * ca) * La, u[:, h:])
    return np.concatenate([left, right], axis=1)


@lru_cache(maxsize=32)
def _mc_profile(law: tuple, N: int, samples: int, seed: int) -> np.ndarray:
    from ..channels import ChannelSpec, sample

    spec = ChannelSpec("dmc", matrix=law)
    rng = np.random.default_rng([seed, N, 0x9A])
    acc = np.zeros(N)
    chunk = max(1, min(samples, (1 << 21) // N))
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        x = rng.integers(0, 2, size=(m, N), dtype=np.uint8)
        y = sample(spec, x, rng)
        L = channel_llr(spec, y)
        u = polar_transform(x)
        leaf = _genie_leaf_llrs(L, u)
        s = (1.0 - 2.0 * u) * leaf
        acc += np.logaddexp(0.0, -s).sum(axis=0) / np.log(2)
        done += m
    out = np.clip(acc / samples, 0.0, 1.0)
    out.setflags(write=False)
    return out


def polar_entropy_profile(channel: ChannelSpec, N: int, samples: int = 10_000,
                          seed: int = 0) -> np.ndarray:
    _log2n(N)
    if not channel.is_binary:
        raise ParameterError("polar backend needs a binary-input channel")
    if channel.kind == "bec":
        return bec_profile(float(channel.param), N)
    return _mc_profile(channel.transition, N, samples, seed).copy()


def polar_select_sets(profiles, cumulative) -> tuple[np.ndarray, ...]:
    """Nested S_1 c ... c S_D grown greedily by the level-l profile, ties to low index."""
    N = len(profiles[0])
    sets, chosen = [], np.zeros(N, dtype=bool)
    prev = 0
    for prof, c in zip(profiles, cumulative):
        if c > N:
            raise ParameterError(f"target size {c} exceeds block length {N}")
        if c < prev:
            raise ParameterError("cumulative targets must be non-decreasing")
        free = np.flatnonzero(~chosen)
        order = free[np.lexsort((free, -np.asarray(prof)[free]))]
        chosen[order[: c - prev]] = True
        sets.append(np.flatnonzero(chosen))
        prev = c
    return tuple(sets)


def polar_encode(x, sets) -> tuple[np.ndarray, ...]:
    x = np.asarray(x, dtype=np.uint8)
    N = x.shape[-1]
    if sets and sets[-1].size and sets[-1][-1] >= N:
        raise ParameterError("block length does not match the index sets")
    u = polar_transform(x)
    out, prev = [], np.zeros(0, dtype=np.int64)
    for s in sets:
        out.append(u[np.setdiff1d(s, prev, assume_unique=True)].copy())
        prev = s
    return tuple(out)


def _frozen_vector(N: int, sets, indices, level: int):
    mask = np.zeros(N, dtype=bool)
    vals = np.zeros(N, dtype=np.uint8)
    prev = np.zeros(0, dtype=np.int64)
    for l in range(level):
        new = np.setdiff1d(sets[l], prev, assume_unique=True)
        bits = np.asarray(indices[l], dtype=np.uint8)
        if bits.size != new.size:
            raise ParameterError(f"level {l + 1} index has {bits.size} bits, expected {new.size}")
        mask[new] = True
        vals[new] = bits
        prev = sets[l]
    return mask, vals


def sc_decode_reference(L, mask, vals):
    """Plain recursive SC without node shortcuts. Returns (u_hat, x_hat)."""
    L = np.asarray(L, dtype=float)
    if L.size == 1:
        u = vals[:1].copy() if mask[0] else np.array([0 if L[0] >= 0 else 1], dtype=np.uint8)
        return u, u.copy()
    h = L.size // 2
    ua, ca = sc_decode_reference(_f(L[:h], L[h:]), mask[:h], vals[:h])
    ub, cb = sc_decode_reference(L[h:] + (1.0 - 2.0 * ca) * L[:h], mask[h:], vals[h:])
    return np.concatenate([ua, ub]), np.concatenate([ca ^ cb, cb])


def _sc_fast(L, mask, vals):
    if mask.all():
        return vals.copy(), polar_transform(vals)
    if not mask.any() and np.all(L != 0):
        c = (L < 0).astype(np.uint8)
        return polar_transform(c), c
    if L.size == 1:
        u = np.array([0 if L[0] >= 0 else 1], dtype=np.uint8)
        return u, u.copy()
    h = L.size // 2
    ua, ca = _sc_fast(_f(L[:h], L[h:]), mask[:h], vals[:h])
    ub, cb = _sc_fast(L[h:] + (1.0 - 2.0 * ca) * L[:h], mask[h:], vals[h:])
    return np.concatenate([ua, ub]), np.concatenate([ca ^ cb, cb])


def polar_sc_decode(level: int, indices, y, channel: ChannelSpec, sets) -> np.ndarray:
    """SC estimate of x from side information y and the level 1..level indices."""
    y = np.asarray(y)
    N = y.size
    _log2n(N)
    mask, vals = _frozen_vector(N, sets, indices, level)
    _, x = _sc_fast(channel_llr(channel, y), mask, vals)
    return x
