"""Command-line entry point: capacity, simulate, audit, serve, bench."""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis
from .channels import order_and_validate, parse_channel
from .errors import BackendUnavailable, ParameterError, PirnsiError
from .schemas import validate

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PIRNSI_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"PIRNSI_SEED must be an integer, got {env!r}") from exc


def _add_instance(p, need_d=True):
    p.add_argument("--n", type=int, default=2, help="servers N")
    p.add_argument("--t", type=int, default=1, help="colluding servers T")
    p.add_argument("--k", type=int, default=2, help="files K")
    p.add_argument("--d", type=_ints, required=need_d, default=None if need_d else (1, 1),
                   help="files per channel, e.g. 1,1")
    p.add_argument("--channels", default="bec:0.2,bec:0.6",
                   help="comma-separated bec:<e> | bsc:<p> | dmc:<path>")


def _add_run(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--nsrc", type=int, default=1 << 10)
    p.add_argument("--delta", default="0.05")
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--backend", choices=("auto", "polar", "binning"), default="auto")
    p.add_argument("--schedule", choices=("staged", "flat"), default="staged")
    p.add_argument("--b", type=int, default=None, help="field width (default: 8, 16 if needed)")


def _bank(args):
    return order_and_validate([parse_channel(c) for c in args.channels.split(",")])


def _instance(args, **over):
    from .protocol import Instance

    try:
        delta = Fraction(args.delta)
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"bad --delta {args.delta!r}") from exc
    kw = dict(n_src=args.nsrc, delta=delta, b=args.b, backend=args.backend, seed=_seed(args),
              blocks=args.blocks, schedule=args.schedule)
    kw.update(over)
    return Instance(args.n, args.t, args.k, tuple(args.d), _bank(args), **kw)


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---- capacity --------------------------------------------------------------------

def capacity_doc(args) -> dict:
    bank = _bank(args)
    inp = analysis.CapacityInput.make(args.n, args.t, args.k, args.d, analysis.entropies_of(bank))
    g = analysis.compare_metrics(inp)
    doc = {"N": inp.N, "T": inp.T, "K": inp.K, "d": list(inp.d), "h": [str(h) for h in inp.h],
           "C": str(g.C), "C_star": str(g.C_star), "R": {str(u): str(r) for u, r in g.R.items()},
           "gap": str(g.gap),
           "float": {"C": float(g.C), "C_star": float(g.C_star), "gap": float(g.gap),
                     "R": {str(u): float(r) for u, r in g.R.items()}}}
    if bank.ties:
        # Equal entropy, different laws: ordering fell back to input order.
        doc["ties"] = [[a + 1, b + 1] for a, b in bank.ties]
        print("warning: channels at levels " + "; ".join(f"{a + 1},{b + 1}" for a, b in bank.ties)
              + " have equal conditional entropy; ordered by input position", file=sys.stderr)
    validate(doc, "capacity")
    return doc


def cmd_capacity(args) -> int:
    doc = capacity_doc(args)
    if args.format == "json":
        _emit(json.dumps(doc, indent=2) + "\n", args.out)
    elif args.format == "csv":
        row = {"N": doc["N"], "T": doc["T"], "K": doc["K"], "d": ",".join(map(str, doc["d"])),
               "C": doc["C"], "C_star": doc["C_star"], "gap": doc["gap"]}
        row.update({f"R{u}": r for u, r in doc["R"].items()})
        _emit(analysis.to_csv([row]), args.out)
    else:
        f = doc["float"]
        lines = [f"C={f['C']:g} ({doc['C']})", f"C*={f['C_star']:g} ({doc['C_star']})"]
        lines += [f"R({u})={f['R'][u]:g} ({r})" for u, r in doc["R"].items()]
        lines.append(f"gap={f['gap']:g} ({doc['gap']})")
        _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# ---- simulate ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from . import protocol as pr

    inst = _instance(args)
    world = pr.setup(inst)
    metric = args.metric
    if args.z is None:
        z = pr.draw_z(world, metric, np.random.default_rng([inst.seed, 0x7A]))
    else:
        z = args.z
    if metric == 1:
        from .channels import admissible_z
        if z not in admissible_z(world.mapping, 1, inst.bank):
            raise UsageError(f"z={z} is not admissible under metric 1")
    res = pr.retrieve(world.client_view(), z, metric,
                      pr.InProcessTransport(world.databases, inst.N), strict=args.strict)
    ok = res.x_hat is not None and bool(np.array_equal(res.x_hat, world.files[z]))
    if args.strict and not ok:
        print(f"error: decoded file {z} differs from the original", file=sys.stderr)
        return EXIT_RUNTIME
    transcript = dict(res.transcript)
    transcript["digest"] = res.digest
    transcript["success"] = ok
    validate(transcript, "transcript")
    validate(res.report.to_dict(), "cost_report")
    inp = analysis.CapacityInput.make(inst.N, inst.T, inst.K, inst.d,
                                      analysis.entropies_of(inst.bank))
    cmp = analysis.theory_vs_measured(res.report, inp)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "transcript.json").write_text(json.dumps(transcript, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
        (out / "cost.json").write_text(json.dumps(res.report.to_dict(), indent=2, sort_keys=True)
                                       + "\n", encoding="utf-8")
        (out / "comparison.json").write_text(json.dumps(cmp, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    if args.dump_db:
        from .net import dump_databases
        Path(args.dump_db).write_bytes(dump_databases(world.databases))
    print(f"metric={metric} z={z} level={world.mapping[z]} backend={world.code.backend} "
          f"success={ok}")
    print(f"measured net={cmp['measured_net']:.6f} gross={cmp['measured_gross']:.6f} "
          f"theory={cmp['theory']:.6f} slack={cmp['slack']:.6f}")
    print(f"digest={res.digest}")
    return EXIT_OK


# ---- audit ---------------------------------------------------------------------

def cmd_audit(args) -> int:
    from . import privacy_audit as pa

    inst = _instance(args, n_src=1, backend="binning")
    colluding = _ints(args.colluding) if args.colluding else tuple(range(inst.T))
    if args.exact:
        rep = pa.audit_exact(inst, args.metric, colluding)
    else:
        rep = pa.audit_statistical(inst, args.metric, colluding, runs=args.runs, seed=_seed(args))
    doc = rep.to_dict()
    validate(doc, "audit_report")
    _emit(json.dumps(doc, sort_keys=True) + "\n", args.out)
    return EXIT_OK if rep.passed else EXIT_RUNTIME


# ---- serve ---------------------------------------------------------------------

def cmd_serve(args) -> int:
    from . import net

    if args.db:
        try:
            dbs = net.load_databases(Path(args.db).read_bytes())
        except OSError as exc:
            raise UsageError(f"cannot read {args.db}: {exc}") from exc
    else:
        from .protocol import setup
        dbs = setup(_instance(args)).databases

    def ready(port):
        print(f"listening on {args.host}:{port}", flush=True)

    try:
        net.serve(args.port, dbs, args.server_id, args.host, ready)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# ---- bench ---------------------------------------------------------------------

def parse_sweep(text: str) -> list[dict]:
    """`t=1..3,n=4` -> cartesian grid of {'t': .., 'n': ..}."""
    from itertools import product

    axes = {}
    for part in text.split(","):
        key, sep, val = part.partition("=")
        key = key.strip().lower()
        if not sep or key not in ("n", "t", "k", "nsrc"):
            raise UsageError(f"bad sweep term {part!r} (keys: n, t, k, nsrc)")
        try:
            if ".." in val:
                lo, hi = (int(v) for v in val.split(".."))
                vals = list(range(lo, hi + 1))
            else:
                vals = [int(v) for v in val.split("|")]
        except ValueError as exc:
            raise UsageError(f"bad sweep range {val!r}") from exc
        if not vals:
            raise UsageError(f"empty sweep range {val!r}")
        axes[key] = vals
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in product(*(axes[k] for k in keys))]


def bench_row(args, point: dict) -> dict:
    from . import pirquery as pq
    from . import protocol as pr

    a = argparse.Namespace(**vars(args))
    for k, v in point.items():
        setattr(a, k, v)
    row = {"N": a.n, "T": a.t, "K": a.k, "d": ",".join(map(str, a.d)), "nsrc": a.nsrc}
    try:
        bank = _bank(a)
        inp = analysis.CapacityInput.make(a.n, a.t, a.k, a.d, analysis.entropies_of(bank))
        g = analysis.compare_metrics(inp)
    except ParameterError as exc:
        row["error"] = str(exc)
        return row
    row.update({"C": float(g.C), "C_star": float(g.C_star), "gap": float(g.gap)})
    row.update({f"R{u}": float(r) for u, r in g.R.items()})
    from .nested_sc import allocate_rates
    alloc = allocate_rates(bank, Fraction(a.delta), a.nsrc)
    rates = [alloc.rate(l) for l in range(1, bank.D + 1)]
    flat = pq.structural_cost_model(a.n, a.t, a.k, a.d, rates)
    row["model_flat"] = float(sum(c.rate for c in flat))
    staged = pq.staged_cost_model(a.n, a.t, a.k, a.d, rates, bank.D)
    row["model_staged"] = float(sum(c.rate for c in staged))
    if a.t == 1 and a.n >= 2 or a.t == a.n:
        try:
            inst = _instance(a)
            w = pr.setup(inst)
            z = pr.draw_z(w, 1, np.random.default_rng([inst.seed, 0x7A]))
            r = pr.retrieve(w.client_view(), z, 1, pr.InProcessTransport(w.databases, inst.N))
            row["measured_net"] = float(r.report.net_cost)
            row["measured_gross"] = float(r.report.gross_cost)
            row["success"] = r.x_hat is not None and bool(np.array_equal(r.x_hat, w.files[z]))
        except (PirnsiError, ValueError) as exc:
            row["error"] = str(exc)
    return row


def cmd_bench(args) -> int:
    grid = parse_sweep(args.sweep) if args.sweep else [{}]
    rows = [bench_row(args, p) for p in grid]
    text = analysis.to_json(rows) + "\n" if args.format == "json" else analysis.to_csv(rows)
    _emit(text, args.out)
    return EXIT_OK


# ---- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pirnsi", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("capacity", help="closed-form optimal download costs")
    _add_instance(c)
    c.add_argument("--format", choices=("text", "json", "csv"), default="text")
    c.add_argument("--out")
    c.set_defaults(func=cmd_capacity)

    s = sub.add_parser("simulate", help="run one seeded retrieval")
    _add_instance(s, need_d=False)
    _add_run(s)
    s.add_argument("--metric", type=int, choices=(1, 2), default=1)
    s.add_argument("--z", type=int, default=None, help="desired file (0-based)")
    s.add_argument("--strict", action="store_true", help="exit 1 on any decode failure")
    s.add_argument("--out", help="directory for transcript.json, cost.json, comparison.json")
    s.add_argument("--dump-db", help="write the level databases to this file")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("audit", help="privacy audit of the query builder")
    _add_instance(a, need_d=False)
    _add_run(a)
    a.add_argument("--metric", type=int, choices=(1, 2), default=1)
    a.add_argument("--exact", action="store_true")
    a.add_argument("--runs", type=int, default=1000)
    a.add_argument("--colluding", default=None, help="server indices, e.g. 0")
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit)

    v = sub.add_parser("serve", help="run one server daemon")
    _add_instance(v, need_d=False)
    _add_run(v)
    v.add_argument("--port", type=int, default=0)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--db", help="database file (PIRNSI01); default: build from the seed")
    v.add_argument("--server-id", type=int, default=0)
    v.set_defaults(func=cmd_serve)

    b = sub.add_parser("bench", help="parameter sweep with theory and measured columns")
    _add_instance(b, need_d=False)
    _add_run(b)
    b.add_argument("--sweep", default=None, help="e.g. t=1..3,n=4")
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "nsrc", 1) < 1:
            raise UsageError("--nsrc must be positive")
        return args.func(args)
    except (UsageError, ParameterError, BackendUnavailable) as exc:
        print(f"pirnsi {args.cmd}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PirnsiError as exc:
        print(f"pirnsi {args.cmd}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
