"""Nested source coding with side information: rate allocation and two backends."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..channels import ChannelBank, ChannelSpec, is_degraded_chain
from ..errors import BackendUnavailable, ParameterError
from .binning import MAX_NSRC, rb_decode, rb_encode
from .polar import (polar_encode, polar_entropy_profile, polar_sc_decode, polar_select_sets,
                    polar_transform)
from .rates import RateAllocation, allocate_rates

__all__ = [
    "RateAllocation", "allocate_rates", "NestedCode", "build_code", "rb_encode", "rb_decode",
    "polar_encode", "polar_sc_decode", "polar_select_sets", "polar_entropy_profile",
    "polar_transform", "polar_available",
]


def polar_available(bank: ChannelBank, n_src: int) -> bool:
    return (n_src >= 1 and n_src & (n_src - 1) == 0
            and all(s.is_binary for s in bank.specs) and is_degraded_chain(bank))


@dataclass(frozen=True, eq=False)
class NestedCode:
    backend: str
    alloc: RateAllocation
    seed: int
    sets: tuple | None = None

    @property
    def n_src(self) -> int:
        return self.alloc.n_src

    def encode_block(self, x) -> tuple[np.ndarray, ...]:
        if self.backend == "polar":
            return polar_encode(x, self.sets)
        return rb_encode(x, self.alloc, self.seed)

    def decode_block(self, level: int, indices, y, channel: ChannelSpec):
        if self.backend == "polar":
            return polar_sc_decode(level, indices, y, channel, self.sets)
        return rb_decode(level, indices, y, self.alloc, self.seed, channel)

    def encode(self, x) -> tuple[np.ndarray, ...]:
        """Per-level bit strings for a file of B blocks, blocks concatenated."""
        x = np.asarray(x, dtype=np.uint8)
        if x.size % self.n_src:
            raise ParameterError("file length is not a multiple of n_src")
        blocks = [self.encode_block(b) for b in x.reshape(-1, self.n_src)]
        return tuple(np.concatenate([b[l] for b in blocks]).astype(np.uint8)
                     for l in range(self.alloc.D))

    def decode(self, level: int, indices, y, channel: ChannelSpec):
        """Decode a whole file; None if any block abstains."""
        y = np.asarray(y)
        B = y.size // self.n_src
        out = []
        for i in range(B):
            idx = [np.asarray(indices[l])[i * m:(i + 1) * m]
                   for l, m in enumerate(self.alloc.m[:level])]
            xb = self.decode_block(level, idx, y[i * self.n_src:(i + 1) * self.n_src], channel)
            if xb is None:
                return None
            out.append(xb)
        return np.concatenate(out).astype(np.uint8)


def build_code(bank: ChannelBank, alloc: RateAllocation, backend: str = "auto",
               seed: int = 0, profile_samples: int = 10_000) -> NestedCode:
    if backend not in ("auto", "polar", "binning"):
        raise ParameterError(f"unknown backend {backend!r}")
    n = alloc.n_src
    if backend in ("auto", "polar") and polar_available(bank, n):
        profiles = [polar_entropy_profile(s, n, samples=profile_samples, seed=seed)
                    for s in bank.specs]
        return NestedCode("polar", alloc, seed, polar_select_sets(profiles, alloc.cumulative))
    if backend == "polar":
        raise BackendUnavailable(
            "polar backend needs n_src a power of two and a degraded binary channel chain")
    if n > MAX_NSRC:
        raise BackendUnavailable(f"binning backend is capped at n_src <= {MAX_NSRC}")
    return NestedCode("binning", alloc, seed)
