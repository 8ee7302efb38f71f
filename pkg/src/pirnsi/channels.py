"""Test channels, side-information sampling, ordering, degradedness and mappings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import permutations
from pathlib import Path

import numpy as np

from .errors import ParameterError

ERASURE = 2  # output symbol for an erased BEC position


def as_fraction(v) -> Fraction:
    """Exact rational from int/str/Fraction; floats go through their repr."""
    if isinstance(v, Fraction):
        return v
    if isinstance(v, float):
        return Fraction(repr(v))
    return Fraction(v)


@dataclass(frozen=True)
class ChannelSpec:
    kind: str  # "bec" | "bsc" | "dmc"
    param: Fraction | None = None
    matrix: tuple[tuple[Fraction, ...], ...] | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind == "bec":
            if not 0 <= self.param <= 1:
                raise ParameterError(f"BEC erasure probability {self.param} outside [0,1]")
        elif self.kind == "bsc":
            if not 0 <= self.param <= Fraction(1, 2):
                raise ParameterError(f"BSC crossover {self.param} outside [0,1/2]")
        elif self.kind == "dmc":
            m = self.matrix
            if not m or any(len(r) != len(m[0]) for r in m):
                raise ParameterError("DMC matrix must be a non-empty rectangle")
            for r in m:
                if any(v < 0 for v in r) or abs(float(sum(r)) - 1.0) > 1e-12:
                    raise ParameterError("DMC rows must be non-negative and sum to 1")
        else:
            raise ParameterError(f"unknown channel kind {self.kind!r}")

    @property
    def transition(self) -> tuple[tuple[Fraction, ...], ...]:
        """Row-stochastic matrix W[x][y] with exact entries."""
        if self.kind == "bec":
            e = self.param
            return ((1 - e, Fraction(0), e), (Fraction(0), 1 - e, e))
        if self.kind == "bsc":
            p = self.param
            return ((1 - p, p), (p, 1 - p))
        return self.matrix

    @property
    def input_size(self) -> int:
        return len(self.transition)

    @property
    def output_size(self) -> int:
        return len(self.transition[0])

    @property
    def is_binary(self) -> bool:
        return self.input_size == 2

    def W(self) -> np.ndarray:
        return np.array([[float(v) for v in r] for r in self.transition])

    def __str__(self):
        if self.label:
            return self.label
        if self.kind == "dmc":
            return "dmc:<matrix>"
        return f"{self.kind}:{float(self.param):g}"


def bec(eps) -> ChannelSpec:
    return ChannelSpec("bec", as_fraction(eps))


def bsc(p) -> ChannelSpec:
    return ChannelSpec("bsc", as_fraction(p))


def dmc(rows) -> ChannelSpec:
    return ChannelSpec("dmc", matrix=tuple(tuple(as_fraction(v) for v in r) for r in rows))


def parse_channel(text: str) -> ChannelSpec:
    """Parse `bec:<e>`, `bsc:<p>` or `dmc:<path>`."""
    kind, sep, arg = text.strip().partition(":")
    kind = kind.lower()
    if not sep or not arg:
        raise ParameterError(f"bad channel spec {text!r}")
    try:
        if kind == "bec":
            return ChannelSpec("bec", Fraction(arg), label=text.strip())
        if kind == "bsc":
            return ChannelSpec("bsc", Fraction(arg), label=text.strip())
    except ValueError as exc:
        raise ParameterError(f"bad channel parameter in {text!r}") from exc
    if kind == "dmc":
        try:
            lines = Path(arg).read_text(encoding="utf-8").splitlines()
            rows = [[Fraction(t) for t in ln.split()] for ln in lines if ln.strip()]
        except (OSError, ValueError) as exc:
            raise ParameterError(f"cannot read DMC matrix from {arg!r}: {exc}") from exc
        return ChannelSpec("dmc", matrix=tuple(tuple(r) for r in rows), label=text.strip())
    raise ParameterError(f"unknown channel kind in {text!r}")


def binary_entropy(p) -> float:
    p = float(p)
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def conditional_entropy(spec: ChannelSpec) -> Fraction | float:
    """H(X|Y) in bits for uniform input. Exact Fraction for the BEC."""
    if spec.kind == "bec":
        return spec.param
    if spec.kind == "bsc":
        return binary_entropy(spec.param)
    W = spec.W()
    px = 1.0 / W.shape[0]
    py = W.sum(axis=0) * px
    h = 0.0
    for x in range(W.shape[0]):
        for y in range(W.shape[1]):
            if W[x, y] > 0:
                h -= px * W[x, y] * math.log2(px * W[x, y] / py[y])
    return h


def sample(spec: ChannelSpec, x, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() >= spec.input_size):
        raise ParameterError("input symbols outside the channel alphabet")
    if spec.kind == "bec":
        y = x.astype(np.uint8).copy()
        y[rng.random(x.shape) < float(spec.param)] = ERASURE
        return y
    if spec.kind == "bsc":
        return (x ^ (rng.random(x.shape) < float(spec.param))).astype(np.uint8)
    cdf = np.cumsum(spec.W(), axis=1)
    u = rng.random(x.shape)
    y = (u[..., None] >= cdf[x]).sum(axis=-1)
    return np.minimum(y, spec.output_size - 1).astype(np.uint16 if spec.output_size > 255 else np.uint8)


@dataclass(frozen=True)
class ChannelBank:
    specs: tuple[ChannelSpec, ...]
    entropies: tuple
    order: tuple[int, ...]  # original index of each sorted entry
    ties: tuple[tuple[int, int], ...] = ()  # sorted-level pairs with equal entropy

    @property
    def D(self) -> int:
        return len(self.specs)


def order_and_validate(specs) -> ChannelBank:
    specs = list(specs)
    if not specs:
        raise ParameterError("at least one channel is required")
    laws = [s.transition for s in specs]
    for i in range(len(specs)):
        for j in range(i):
            if laws[i] == laws[j]:
                raise ParameterError(f"channels {j} and {i} have identical statistics")
    ent = [conditional_entropy(s) for s in specs]
    idx = sorted(range(len(specs)), key=lambda i: (float(ent[i]), i))
    ties = tuple((a, a + 1) for a in range(len(idx) - 1)
                 if math.isclose(float(ent[idx[a]]), float(ent[idx[a + 1]]), abs_tol=1e-12))
    return ChannelBank(tuple(specs[i] for i in idx), tuple(ent[i] for i in idx), tuple(idx), ties)


# ---- degradedness ---------------------------------------------------------

def _simplex_feasible(A: list[list[Fraction]], b: list[Fraction]) -> bool:
    """Phase-1 simplex with Bland's rule: is {x >= 0 : A x = b} non-empty?"""
    m, n = len(A), len(A[0])
    rows = []
    for i in range(m):
        s = -1 if b[i] < 0 else 1
        rows.append([s * v for v in A[i]] + [Fraction(int(k == i)) for k in range(m)] + [s * b[i]])
    basis = list(range(n, n + m))
    # Objective: minimise the sum of artificials, written as reduced costs.
    cost = [Fraction(0)] * (n + m + 1)
    for r in rows:
        for j in range(n):
            cost[j] -= r[j]
        cost[-1] -= r[-1]
    while True:
        enter = next((j for j in range(n + m) if cost[j] < 0), None)
        if enter is None:
            break
        best, leave = None, None
        for i, r in enumerate(rows):
            if r[enter] > 0:
                ratio = r[-1] / r[enter]
                if best is None or ratio < best or (ratio == best and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:  # unbounded; cannot happen for phase 1
            break
        piv = rows[leave][enter]
        rows[leave] = [v / piv for v in rows[leave]]
        for i, r in enumerate(rows):
            if i != leave and r[enter] != 0:
                f = r[enter]
                rows[i] = [a - f * c for a, c in zip(r, rows[leave])]
        f = cost[enter]
        cost = [a - f * c for a, c in zip(cost, rows[leave])]
        basis[leave] = enter
    return cost[-1] == 0


def _degrading_system(Wi, Wj):
    """Equations for a stochastic T with Wi T = Wj (variables T[a][c], row-major)."""
    xs, ya, yc = len(Wi), len(Wi[0]), len(Wj[0])
    A, b = [], []
    for x in range(xs):
        for c in range(yc):
            A.append([Wi[x][a] if cc == c else Fraction(0) for a in range(ya) for cc in range(yc)])
            b.append(Wj[x][c])
    for a in range(ya):
        A.append([Fraction(int(aa == a)) for aa in range(ya) for _ in range(yc)])
        b.append(Fraction(1))
    return A, b


def is_degraded(better: ChannelSpec, worse: ChannelSpec) -> bool:
    """True iff worse = better followed by some stochastic map."""
    Wi, Wj = better.transition, worse.transition
    if len(Wi) != len(Wj):
        return False
    if max(len(Wi[0]), len(Wj[0])) <= 4:
        A, b = _degrading_system(Wi, Wj)
        return _simplex_feasible(A, b)
    from scipy.optimize import linprog

    A, b = _degrading_system(Wi, Wj)
    res = linprog(np.zeros(len(A[0])), A_eq=np.array(A, dtype=float), b_eq=np.array(b, dtype=float),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        return False
    return bool(np.max(np.abs(np.array(A, float) @ res.x - np.array(b, float))) <= 1e-9)


def is_degraded_chain(bank: ChannelBank) -> bool:
    s = bank.specs
    return all(is_degraded(s[i], s[j]) for i in range(len(s)) for j in range(i + 1, len(s)))


# ---- mappings ------------------------------------------------------------

@dataclass(frozen=True)
class Mapping:
    levels: tuple[int, ...]  # levels[k] in 1..D for file k (0-based files)

    @property
    def K(self) -> int:
        return len(self.levels)

    def files_at(self, level: int) -> tuple[int, ...]:
        return tuple(k for k, v in enumerate(self.levels) if v == level)

    def files_below(self, level: int) -> tuple[int, ...]:
        return tuple(k for k, v in enumerate(self.levels) if v < level)

    def __getitem__(self, k: int) -> int:
        return self.levels[k]


def _check_counts(d) -> tuple[int, ...]:
    d = tuple(int(v) for v in d)
    if not d or any(v < 1 for v in d):
        raise ParameterError(f"every d_i must be >= 1, got {d}")
    return d


def sample_mapping(d, rng: np.random.Generator) -> Mapping:
    d = _check_counts(d)
    base = np.repeat(np.arange(1, len(d) + 1), d)
    return Mapping(tuple(int(v) for v in rng.permutation(base)))


def all_mappings(d) -> list[Mapping]:
    d = _check_counts(d)
    base = np.repeat(np.arange(1, len(d) + 1), d).tolist()
    return [Mapping(p) for p in sorted(set(permutations(base)))]


def admissible_z(mapping: Mapping, metric: int, bank: ChannelBank) -> tuple[int, ...]:
    """Support of Z: level-1 files are excluded only for metric 1 with a noiseless C^(1)."""
    if metric == 1 and conditional_entropy(bank.specs[0]) == 0:
        return tuple(k for k in range(mapping.K) if mapping[k] != 1)
    return tuple(range(mapping.K))
