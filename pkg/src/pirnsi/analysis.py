"""Closed-form download-cost calculators and theory-versus-measurement comparison.

All functions accept rationals and stay exact when given Fractions.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction

from .channels import as_fraction, binary_entropy, conditional_entropy
from .errors import ParameterError


def psi_inv(A, B: int):
    """1 + A + ... + A^(B-1); zero for B = 0."""
    if B < 0:
        raise ParameterError("psi_inv needs B >= 0")
    total, term = 0, 1
    for _ in range(B):
        total += term
        term *= A
    return Fraction(total) if isinstance(A, (int, Fraction)) else total


@dataclass(frozen=True)
class CapacityInput:
    N: int
    T: int
    K: int
    d: tuple[int, ...]
    h: tuple  # H(X|Y_l) per level, ascending

    def __post_init__(self):
        if not 1 <= self.T <= self.N:
            raise ParameterError("need 1 <= T <= N")
        if sum(self.d) != self.K or any(v < 1 for v in self.d):
            raise ParameterError("d must be positive and sum to K")
        if len(self.h) != len(self.d):
            raise ParameterError("one entropy per level is required")
        if any(self.h[i] > self.h[i + 1] for i in range(len(self.h) - 1)):
            raise ParameterError("entropies must be ascending")

    @classmethod
    def make(cls, N, T, K, d, h) -> "CapacityInput":
        return cls(int(N), int(T), int(K), tuple(int(v) for v in d), tuple(_exact(v) for v in h))

    @property
    def D(self) -> int:
        return len(self.d)

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.T, self.N)

    def tail(self, i: int) -> int:
        """d_[i:D] with 1-based i; zero when i > D."""
        return sum(self.d[i - 1:])


def _exact(v):
    # Floats (e.g. binary entropies) stay floats; everything else becomes exact.
    return v if isinstance(v, float) else as_fraction(v)


def capacity_metric1(inp: CapacityInput):
    a = inp.ratio
    return sum((h * a ** inp.tail(l + 1) * psi_inv(a, dl)
                for l, (h, dl) in enumerate(zip(inp.h, inp.d), start=1)), Fraction(0))


def rate_given_level(inp: CapacityInput, U: int):
    """R(U): cost when the desired file's level U is disclosed."""
    if not 1 <= U <= inp.D:
        raise ParameterError("U out of range")
    a = inp.ratio
    head = sum((inp.h[l - 1] * a ** inp.tail(l + 1) * psi_inv(a, inp.d[l - 1])
                for l in range(1, U)), Fraction(0))
    return head + inp.h[U - 1] * psi_inv(a, inp.tail(U))


def capacity_metric2(inp: CapacityInput):
    r = {u: rate_given_level(inp, u) for u in range(1, inp.D + 1)}
    return sum((Fraction(inp.d[u - 1], inp.K) * r[u] for u in r), Fraction(0)), r


def capacity_metric2_expanded(inp: CapacityInput):
    """Average form written level by level, used as a cross-check."""
    a = inp.ratio
    total = Fraction(0)
    for l in range(1, inp.D + 1):
        t = inp.tail(l + 1)
        total += inp.h[l - 1] * (t * a ** t * psi_inv(a, inp.d[l - 1])
                                 + inp.d[l - 1] * psi_inv(a, inp.tail(l)))
    return total / inp.K


def _bank_input(N, T, K, d, h, what: str) -> CapacityInput:
    if any(h[i] > h[i + 1] for i in range(len(h) - 1)):
        raise ParameterError(f"{what} parameters must be ascending")
    return CapacityInput.make(N, T, K, d, h)


def capacity_bec(N, T, K, d, eps, metric: int = 1):
    inp = _bank_input(N, T, K, d, [as_fraction(e) for e in eps], "erasure")
    return capacity_metric1(inp) if metric == 1 else capacity_metric2(inp)[0]


def capacity_bsc(N, T, K, d, p, metric: int = 1):
    ps = [as_fraction(v) for v in p]
    if any(not 0 <= v <= Fraction(1, 2) for v in ps):
        raise ParameterError("BSC parameters must lie in [0, 1/2]")
    h = [Fraction(0) if v == 0 else Fraction(1) if v == Fraction(1, 2) else binary_entropy(v)
         for v in ps]
    inp = _bank_input(N, T, K, d, h, "crossover")
    return capacity_metric1(inp) if metric == 1 else capacity_metric2(inp)[0]


def entropies_of(bank) -> tuple:
    return tuple(conditional_entropy(s) for s in bank.specs)


@dataclass(frozen=True)
class GapReport:
    C: object
    C_star: object
    R: dict
    gap: object
    per_u_slack: dict
    decomposition: dict


def compare_metrics(inp: CapacityInput) -> GapReport:
    C = capacity_metric1(inp)
    Cs, R = capacity_metric2(inp)
    a = inp.ratio
    decomp = {}
    for U, r in R.items():
        if r > C:
            raise AssertionError(f"R({U}) = {r} exceeds C = {C}")
        hU = inp.h[U - 1]
        decomp[U] = sum(((inp.h[l - 1] - hU) * a ** inp.tail(l + 1) * psi_inv(a, inp.d[l - 1])
                         for l in range(U, inp.D + 1)), Fraction(0))
    if Cs > C:
        raise AssertionError(f"C* = {Cs} exceeds C = {C}")
    return GapReport(C, Cs, R, C - Cs, {u: C - r for u, r in R.items()}, decomp)


def example7_sum(N: int, K: int, r) -> Fraction:
    """Closed form of the storage-constrained special case (T=1, d=(1,..,1,K-M))."""
    M = len(r)
    return (sum((1 - as_fraction(ri)) / Fraction(N) ** (K - i) for i, ri in enumerate(r, start=1))
            + sum((Fraction(1, N) ** j for j in range(K - M)), Fraction(0)))


def achievability_sum(inp: CapacityInput):
    """sum_l (h_l - h_{l-1}) psi_inv(T/N, K - d_[l-1]); telescopes to the metric-1 formula."""
    a, prev, pref, tot = inp.ratio, Fraction(0), 0, Fraction(0)
    for h, dl in zip(inp.h, inp.d):
        tot += (h - prev) * psi_inv(a, inp.K - pref)
        prev, pref = h, pref + dl
    return tot


# ---- measurement comparison -------------------------------------------------

def theory_vs_measured(report, inp: CapacityInput, schedule_costs=None) -> dict:
    """Slack table between a CostReport and the closed forms.

    `schedule_costs` is the exact structural cost of the schedule that ran (a
    list of LevelCost); the slack is split into rate rounding/delta, schedule
    overhead and padding.
    """
    if report.metric == 1:
        theory = capacity_metric1(inp)
    else:
        theory = rate_given_level(inp, report.levels_executed)
    rows = []
    for lv in report.levels:
        rows.append({"level": lv.level, "measured_net": float(lv.net_cost),
                     "measured_gross": float(lv.gross_cost)})
    measured = report.net_cost
    out = {"metric": report.metric, "theory": float(theory), "measured_net": float(measured),
           "measured_gross": float(report.gross_cost), "slack": float(measured - theory),
           "padding": float(report.gross_cost - report.net_cost), "levels": rows}
    if schedule_costs is not None:
        sched = sum((c.rate for c in schedule_costs), Fraction(0))
        out["schedule_cost"] = float(sched)
        out["rate_slack"] = float(measured - sched)
    return out


def slack_bound(N: int, K: int, delta, padding: float = 0.0) -> float:
    return float(N * K * as_fraction(delta)) + padding


# ---- sweep tables -----------------------------------------------------------

def sweep_rows(grid) -> list[dict]:
    rows = []
    for inp in grid:
        g = compare_metrics(inp)
        row = {"N": inp.N, "T": inp.T, "K": inp.K, "d": ",".join(map(str, inp.d)),
               "C": float(g.C), "C_star": float(g.C_star), "gap": float(g.gap)}
        for u, r in g.R.items():
            row[f"R{u}"] = float(r)
        rows.append(row)
    return rows


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2, sort_keys=True)
