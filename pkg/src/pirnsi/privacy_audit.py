"""Privacy audits: do the colluding servers' queries depend on (Z, M)?

Why auditing queries suffices: answers are a deterministic function of the
query and the files, and the files are independent of (Z, M). So if the
joint query distribution seen by the colluding set is the same for every
(z, M) cell, the full view (queries, answers, files) carries no information
about (Z, M). Under metric 2 the same holds within each class of cells that
share M(z).

Audits work on the public query builder alone: they never construct files or
side information.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import permutations, product

import numpy as np

from . import pirquery as pq
from .channels import admissible_z, all_mappings
from .errors import ParameterError
from .protocol import Instance, level_schedule

MAX_ATOMS = 10 ** 6


def honest_builder(kind, level, desired, known, N, K, b, perms, servers):
    st = pq.level_structure(kind, N, K, desired)
    return pq.plans_from_perms(st, perms, level, known, b, servers)


def leaky_builder(kind, level, desired, known, N, K, b, perms, servers):
    """Test double: the desired file's positions skip the permutation."""
    perms = list(perms)
    perms[desired] = np.arange(N ** K)
    return honest_builder(kind, level, desired, known, N, K, b, perms, servers)


@dataclass
class AuditReport:
    metric: int
    colluding: tuple
    mode: str
    samples: int
    max_tv: float
    p_value: float
    chi2: float | None
    passed: bool
    classes: dict = field(default_factory=dict)  # class key -> list of cells
    lengths: dict = field(default_factory=dict)  # class key -> transcript lengths (levels)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "colluding": list(self.colluding), "mode": self.mode,
                "samples": self.samples, "max_tv": self.max_tv, "p_value": self.p_value,
                "chi2": self.chi2, "pass": self.passed,
                "classes": {str(k): [list(c) for c in v] for k, v in self.classes.items()},
                "transcript_levels": {str(k): v for k, v in self.lengths.items()},
                "notes": list(self.notes)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _cells(inst: Instance, metric: int):
    """Group (z, mapping) cells into the classes the metric must not separate."""
    classes: dict = {}
    for mp in all_mappings(inst.d):
        for z in admissible_z(mp, metric, inst.bank):
            key = 0 if metric == 1 else mp[z]
            classes.setdefault(key, []).append((z, mp))
    return classes


def _check(inst: Instance, metric: int, colluding) -> tuple:
    if metric not in (1, 2):
        raise ParameterError("metric must be 1 or 2")
    colluding = tuple(sorted(set(int(s) for s in colluding)))
    if len(colluding) != inst.T or any(not 0 <= s < inst.N for s in colluding):
        raise ParameterError(f"colluding set must hold exactly T={inst.T} server indices")
    return colluding


def _tv(p: Counter, q: Counter) -> float:
    tp, tq = sum(p.values()), sum(q.values())
    keys = set(p) | set(q)
    # Exact integer arithmetic before the final division.
    return sum(abs(p[k] * tq - q[k] * tp) for k in keys) / (2 * tp * tq)


def _product(dists):
    acc = Counter({(): 1})
    for d in dists:
        nxt = Counter()
        for a, ca in acc.items():
            for b, cb in d.items():
                nxt[a + (b,)] += ca * cb
        acc = nxt
    return acc


def audit_exact(inst: Instance, metric: int, colluding=(0,), builder=honest_builder,
                max_atoms: int = MAX_ATOMS) -> AuditReport:
    """Exact comparison of query distributions across all (z, M) cells.

    Enumerates every permutation tuple when there are at most `max_atoms` of
    them per level. Larger grids use the orbit argument: with uniform private
    permutations a plan's law is fixed by its slot layout and its per-file
    equality pattern, so two cells have equal laws iff those coincide (TV 0)
    and disjoint supports otherwise (TV 1). That argument needs the builder
    to be permutation-equivariant, which is spot-checked first.
    """
    colluding = _check(inst, metric, colluding)
    N, K, b = inst.N, inst.K, inst.field_width()
    n_pir = N ** K
    atoms = math.factorial(n_pir) ** K
    classes = _cells(inst, metric)
    sched = {key: [level_schedule(inst, mp, z, metric) for z, mp in cells]
             for key, cells in classes.items()}
    report = AuditReport(metric, colluding, "enumerate" if atoms <= max_atoms else "orbit", atoms,
                         0.0, 1.0, None, True,
                         {k: [(z, list(mp.levels)) for z, mp in v] for k, v in classes.items()},
                         {k: sorted({len(s) for s in v}) for k, v in sched.items()})
    if report.mode == "enumerate":
        all_perms = list(product(list(permutations(range(n_pir))), repeat=K))
        cache: dict = {}

        def dist(step):
            if step not in cache:
                level, kind, desired, known = step
                c = Counter()
                for perms in all_perms:
                    plans = builder(kind, level, desired, known, N, K, b,
                                    [np.array(p) for p in perms], colluding)
                    c[b"".join(p.to_bytes() for p in plans)] += 1
                cache[step] = c
            return cache[step]

        def view(steps):
            return [dist(s) for s in steps]
    else:
        if not _equivariant(inst, builder, colluding, sched):
            report.passed, report.max_tv, report.p_value = False, 1.0, 0.0
            report.notes.append("builder is not permutation-equivariant")
            return report

        def view(steps):
            return [Counter({_signature(builder, s, N, K, b, colluding): 1}) for s in steps]

    worst = 0.0
    for key, steps_list in sched.items():
        views = [view(s) for s in steps_list]
        lens = {len(v) for v in views}
        if len(lens) != 1:
            worst = 1.0
            report.notes.append(f"class {key}: transcript length varies within the class")
            continue
        ref = views[0]
        for v in views[1:]:
            if all(a == c for a, c in zip(ref, v)):
                continue
            worst = max(worst, _tv(_product(ref), _product(v)))
    report.max_tv = worst
    report.p_value = 1.0 if worst == 0 else 0.0
    report.passed = worst == 0
    if metric == 2 and len(classes) > 1:
        report.notes.append("transcript length differs across classes: "
                            + ", ".join(f"U={k}: {v}" for k, v in report.lengths.items()))
    return report


def _signature(builder, step, N, K, b, colluding) -> bytes:
    level, kind, desired, known = step
    plans = builder(kind, level, desired, known, N, K, b,
                    [np.arange(N ** K) for _ in range(K)], colluding)
    parts = []
    for f in range(K):
        col = np.concatenate([p.positions[:, f] for p in plans])
        labels: dict = {}
        parts.append([-1 if v == pq.ABSENT else labels.setdefault(int(v), len(labels))
                      for v in col])
    head = b"".join(p.to_bytes()[:16] for p in plans)
    return head + json.dumps(parts).encode()


def _equivariant(inst, builder, colluding, sched, trials: int = 8) -> bool:
    rng = np.random.default_rng(0xE0)
    N, K, b = inst.N, inst.K, inst.field_width()
    steps = {s for v in sched.values() for ss in v for s in ss}
    for step in sorted(steps, key=repr):
        level, kind, desired, known = step
        ident = builder(kind, level, desired, known, N, K, b,
                        [np.arange(N ** K) for _ in range(K)], colluding)
        for _ in range(trials):
            perms = [rng.permutation(N ** K) for _ in range(K)]
            got = builder(kind, level, desired, known, N, K, b, perms, colluding)
            for g, i in zip(got, ident):
                want = i.positions.copy()
                for f in range(K):
                    m = want[:, f] != pq.ABSENT
                    want[m, f] = perms[f][want[m, f]]
                if not np.array_equal(g.positions, want):
                    return False
    return True


def audit_statistical(inst: Instance, metric: int, colluding=(0,), runs: int = 1000,
                      builder=honest_builder, seed: int = 0, alpha: float = 0.01) -> AuditReport:
    """Per-slot chi-square homogeneity across cells, Bonferroni-combined."""
    from scipy.stats import chi2_contingency

    colluding = _check(inst, metric, colluding)
    if runs < 1000:
        raise ParameterError("statistical audits need runs >= 1000")
    N, K, b = inst.N, inst.K, inst.field_width()
    classes = _cells(inst, metric)
    rng = np.random.default_rng([seed, 0xA0D1])
    report = AuditReport(metric, colluding, "statistical", runs, 0.0, 1.0, 0.0, True,
                         {k: [(z, list(mp.levels)) for z, mp in v] for k, v in classes.items()})
    p_min, n_tests, chi_max, tv_max = 1.0, 0, 0.0, 0.0
    for key, cells in classes.items():
        samples, layouts = [], set()
        for z, mp in cells:
            steps = level_schedule(inst, mp, z, metric)
            rows = []
            for _ in range(runs):
                feats = []
                for level, kind, desired, known in steps:
                    perms = [rng.permutation(N ** K) for _ in range(K)]
                    for p in builder(kind, level, desired, known, N, K, b, perms, colluding):
                        feats.append(p.positions.reshape(-1))
                rows.append(np.concatenate(feats))
            arr = np.stack(rows)
            layouts.add((arr.shape[1], (arr == pq.ABSENT).any(axis=0).tobytes()))
            samples.append(arr)
        report.lengths[key] = sorted({len(level_schedule(inst, mp, z, metric)) for z, mp in cells})
        if len(layouts) != 1:
            p_min, n_tests = 0.0, max(n_tests, 1)
            report.notes.append(f"class {key}: query layout differs between cells")
            continue
        if len(cells) < 2:
            continue
        for j in range(samples[0].shape[1]):
            cols = [s[:, j] for s in samples]
            vals = np.unique(np.concatenate(cols))
            if vals.size < 2:
                continue
            table = np.array([[np.count_nonzero(c == v) for v in vals] for c in cols])
            stat, p, _, _ = chi2_contingency(table)
            freq = table / table.sum(axis=1, keepdims=True)
            tv_max = max(tv_max, float(0.5 * np.abs(freq[:, None, :] - freq[None, :, :]).sum(-1).max()))
            n_tests += 1
            p_min = min(p_min, float(p))
            chi_max = max(chi_max, float(stat))
    report.p_value = min(1.0, p_min * max(n_tests, 1))
    report.chi2 = chi_max
    report.max_tv = tv_max
    report.passed = report.p_value > alpha
    return report
