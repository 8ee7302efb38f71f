"""Acceptance criteria 1-9, each at its stated tolerance and time budget."""

import json
import time
from fractions import Fraction as F

import numpy as np
import pytest

from _oracles import ksum_census
from pirnsi import analysis as an
from pirnsi import net
from pirnsi import pirquery as pq
from pirnsi import privacy_audit as pa
from pirnsi import protocol as pr
from pirnsi.channels import bec, bsc, is_degraded_chain, order_and_validate, sample
from pirnsi.cli import main
from pirnsi.nested_sc import allocate_rates, build_code, polar_entropy_profile, polar_select_sets
from pirnsi.nested_sc.polar import bec_profile

pytestmark = pytest.mark.acceptance


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.s = time.perf_counter() - self.t0


def test_criterion_1_toy_capacity(capsys, record_property):
    with Clock() as c:
        code = main(["capacity", "--n", "1", "--t", "1", "--k", "2", "--d", "1,1",
                     "--channels", "bec:0.2,bec:0.6", "--format", "json"])
        doc = json.loads(capsys.readouterr().out)
    C, Cs = F(doc["C"]), F(doc["C_star"])
    record_property("detail", f"C={C} C*={Cs} in {c.s:.3f}s")
    assert code == 0 and C == F(4, 5) and Cs == F(3, 5) and c.s < 1.0


def test_criterion_2_known_regimes(record_property):
    bad = []
    with Clock() as c:
        for N in range(1, 5):
            for T in range(1, N + 1):
                for K in range(1, 6):
                    if an.capacity_bec(N, T, K, (K,), [1]) != sum(F(T, N) ** i for i in range(K)):
                        bad.append(("no side info", N, T, K))
        for N in range(2, 5):
            for K in range(2, 6):
                for d1 in range(1, K):
                    want = sum(F(1, N) ** i for i in range(K - d1))
                    if an.capacity_bec(N, 1, K, (d1, K - d1), [0, 1]) != want:
                        bad.append(("noiseless", N, K, d1))
                    x = an.CapacityInput.make(N, 1, K, (d1, K - d1), (0, 1))
                    if an.rate_given_level(x, 1) != 0:
                        bad.append(("R(1)", N, K, d1))
        for N, K, r in [(2, 3, ("0.9",)), (2, 4, ("0.8", "0.5")), (3, 5, ("0.7", "0.6", "0.1")),
                        (4, 6, ("0.9", "0.4", "0.3", "0.2"))]:
            M = len(r)
            want = sum((1 - F(r[i - 1])) / F(N) ** (K - i) for i in range(1, M + 1)) \
                + sum(F(1, N ** j) for j in range(K - M))
            got = an.capacity_bec(N, 1, K, (1,) * M + (K - M,), [1 - F(v) for v in r] + [1])
            if got != want:
                bad.append(("storage", N, K, r))
    record_property("detail", f"{len(bad)} mismatches in {c.s:.3f}s")
    assert not bad and c.s < 1.0


def test_criterion_3_metric_ordering_sweep(record_property):
    rng = np.random.default_rng(20240601)
    violations = 0
    with Clock() as c:
        for _ in range(10_000):
            N = int(rng.integers(1, 7))
            T = int(rng.integers(1, N + 1))
            d = tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 5))))
            h = sorted(F(int(v), 1000) for v in rng.integers(0, 1001, size=len(d)))
            x = an.CapacityInput.make(N, T, sum(d), d, h)
            C = an.capacity_metric1(x)
            Cs, R = an.capacity_metric2(x)
            violations += (Cs > C) + sum(r > C for r in R.values())
    record_property("detail", f"{violations} violations over 10^4 inputs in {c.s:.2f}s")
    assert violations == 0 and c.s < 10.0


def test_criterion_4_count_identities(record_property):
    bad = 0
    cases = 0
    with Clock() as c:
        for N in range(2, 5):
            for T in range(1, N):
                for K in range(1, 5):
                    types, inst, p1, _ = ksum_census(N, T, K)
                    for k in range(1, K + 1):
                        bad += pq.ksum_counts(N, T, K, k) != (types[k], inst[k])
                    a = F(T, N)
                    for pref in range(K):
                        cases += 1
                        _, _, _, p2 = ksum_census(N, T, K, known=pref)
                        bad += pq.p_counts(N, T, K, pref) != (p1, p2)
                        d = (pref, K - pref) if pref else (K,)
                        lc = pq.structural_cost_model(N, T, K, d, [F(1)] * len(d))[-1]
                        bad += lc.rate != (1 - a ** (K - pref)) / (1 - a)
    record_property("detail", f"{bad} mismatches over {cases} (N,T,K,prefix) cases in {c.s:.2f}s")
    assert bad == 0 and c.s < 5.0


def test_criterion_5_end_to_end(record_property):
    delta = F(1, 20)
    inst = pr.Instance.from_params(N=2, T=1, K=2, d=(1, 1), channels=("bec:0.2", "bec:0.6"),
                                   n_src=1 << 12, delta=delta, backend="polar", seed=0)
    with Clock() as c:
        res = pr.run_trials(inst, 200, metrics=(1, 2))
    inp = an.CapacityInput.make(2, 1, 2, (1, 1), ("0.2", "0.6"))
    C = float(an.capacity_metric1(inp))
    Cs = float(an.capacity_metric2(inp)[0])
    slack = 2 * 2 * float(delta) + 0.03
    succ = {m: np.mean([r.success[m] for r in res]) for m in (1, 2)}
    cost = {m: np.mean([float(r.net_cost[m]) for r in res]) for m in (1, 2)}
    ok_succ = min(succ.values()) >= 0.95
    ok_cost = cost[1] <= C + slack and cost[2] <= Cs + slack
    record_property("detail", f"success m1={succ[1]:.3f} m2={succ[2]:.3f} (need 0.95); "
                              f"net m1={cost[1]:.4f} <= {C + slack:.2f}, m2={cost[2]:.4f} <= "
                              f"{Cs + slack:.2f}; {c.s:.1f}s")
    assert ok_succ and ok_cost and cost[2] < cost[1] and c.s < 120.0


DEGRADED_CHAINS = [
    (("bec", "0.2"), ("bec", "0.6")),
    (("bec", "0.1"), ("bec", "0.4"), ("bec", "0.8")),
    (("bec", "0.05"), ("bec", "0.5")),
    (("bsc", "0.02"), ("bsc", "0.11")),
    (("bsc", "0.05"), ("bsc", "0.1"), ("bsc", "0.25")),
    (("bec", "0.1"), ("bsc", "0.11")),
]


def test_criterion_6_polar_properties(record_property):
    make = {"bec": bec, "bsc": bsc}
    nest_fail = []
    with Clock() as c:
        for chain in DEGRADED_CHAINS:
            b = order_and_validate([make[k](v) for k, v in chain])
            assert is_degraded_chain(b), chain
            for n in (256, 1024):
                alloc = allocate_rates(b, "0.05", n)
                profs = [polar_entropy_profile(s, n, samples=2000) for s in b.specs]
                sets = polar_select_sets(profs, alloc.cumulative)
                if not all(set(sets[i]) <= set(sets[i + 1]) for i in range(len(sets) - 1)):
                    nest_fail.append((chain, n))
        frac = float((bec_profile(0.5, 1 << 14) > 0.99).mean())
    record_property("detail", f"nesting failures {len(nest_fail)}; BEC(0.5) fraction > 0.99 at "
                              f"2^14 = {frac:.4f} (need 0.5 +/- 0.05); {c.s:.1f}s")
    assert not nest_fail
    assert abs(frac - 0.5) <= 0.05
    assert c.s < 30.0


BACKEND_CONFIGS = [
    (("bec:0.2", "bec:0.6"), "0.05", 4),
    (("bec:0.2", "bec:0.6"), "0.05", 8),
    (("bsc:0.05", "bsc:0.2"), "0.05", 8),
    (("bec:0.5",), "0.25", 8),
]


def _success(code, b, n, trials, seed):
    rng = np.random.default_rng(seed)
    ok = np.zeros(b.D)
    for _ in range(trials):
        x = rng.integers(0, 2, n, dtype=np.uint8)
        idx = code.encode(x)
        for lvl in range(1, b.D + 1):
            y = sample(b.specs[lvl - 1], x, rng)
            xh = code.decode(lvl, idx, y, b.specs[lvl - 1])
            ok[lvl - 1] += xh is not None and np.array_equal(xh, x)
    return ok / trials


def test_criterion_7_backend_equivalence(record_property):
    from pirnsi.channels import parse_channel

    gaps = []
    with Clock() as c:
        for chans, delta, n in BACKEND_CONFIGS:
            b = order_and_validate([parse_channel(s) for s in chans])
            alloc = allocate_rates(b, delta, n)
            rb = _success(build_code(b, alloc, "binning", seed=1), b, n, 500, 11)
            po = _success(build_code(b, alloc, "polar", seed=1), b, n, 500, 11)
            gaps.append(float(np.max(np.abs(rb - po))))
    record_property("detail", "max success gap per config " +
                    ", ".join(f"{g:.3f}" for g in gaps) + f" (need <= 0.1); {c.s:.1f}s")
    assert max(gaps) <= 0.1 and c.s < 120.0


def test_criterion_8_privacy_audit(record_property):
    inst = pr.Instance.from_params(N=2, T=1, K=2, d=(1, 1), n_src=1, backend="binning")
    with Clock() as c:
        m1 = pa.audit_exact(inst, 1)
        m2 = pa.audit_exact(inst, 2)
        leak = pa.audit_exact(inst, 1, builder=pa.leaky_builder)
        leak_stat = pa.audit_statistical(inst, 1, runs=1000, builder=pa.leaky_builder, seed=0)
    record_property("detail", f"TV m1={m1.max_tv} m2={m2.max_tv} ({len(m2.classes)} classes); "
                              f"leaky TV={leak.max_tv:.3f} p={leak_stat.p_value:.2e}; {c.s:.1f}s")
    assert m1.mode == m2.mode == "enumerate"
    assert m1.max_tv == 0 and m2.max_tv == 0
    assert leak.max_tv > 0 and leak_stat.p_value < 1e-6
    assert c.s < 30.0


def test_criterion_9_transport_transparency(record_property):
    rng = np.random.default_rng(99)
    seeds = [int(s) for s in rng.integers(0, 2 ** 31, 20)]
    mismatches = 0
    with Clock() as c:
        for seed in seeds:
            w = pr.setup(pr.Instance.from_params(seed=seed))
            z = int(rng.integers(0, 2))
            metric = int(rng.integers(1, 3))
            local = pr.retrieve(w.client_view(), z, metric, pr.InProcessTransport(w.databases, 2))
            servers = [net.start_background(w.databases, s) for s in range(2)]
            try:
                remote = net.remote_retrieve([("127.0.0.1", s.port) for s in servers],
                                             w.client_view(), z, metric)
            finally:
                for s in servers:
                    s.shutdown()
                    s.server_close()
            same_x = (local.x_hat is None and remote.x_hat is None) or \
                np.array_equal(local.x_hat, remote.x_hat)
            mismatches += not (remote.digest == local.digest and same_x and
                               remote.report.to_dict(wire=False) == local.report.to_dict(wire=False))
    record_property("detail", f"{mismatches} mismatches over 20 seeds; {c.s:.1f}s")
    assert mismatches == 0 and c.s < 60.0
