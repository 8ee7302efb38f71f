"""End-to-end retrieval under both privacy metrics, with cost accounting.

Level schedule
--------------
``staged`` (default): every level below the last executed one runs the T=N
structure, which downloads all still-unknown records (known records are
removed through the parity code). The last level runs the T-private
structure with the desired file. Decoding always has the side information it
needs.

``flat``: every level runs the T-private structure with known set
M^{-1}([l-1]). Its cost equals the per-level structural model exactly, but
with T < N it only retrieves the desired record at each level, so files that
later levels treat as known are usually not decodable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import pirquery as pq
from .channels import (ChannelBank, Mapping, admissible_z, order_and_validate, parse_channel,
                       sample, sample_mapping)
from .errors import DecodeError, ParameterError
from .nested_sc import NestedCode, allocate_rates, build_code

SCHEDULES = ("staged", "flat")


@dataclass(frozen=True)
class Instance:
    N: int
    T: int
    K: int
    d: tuple[int, ...]
    bank: ChannelBank
    n_src: int = 1024
    delta: Fraction = Fraction(1, 20)
    b: int | None = None
    backend: str = "auto"
    seed: int = 0
    blocks: int = 1
    schedule: str = "staged"

    def __post_init__(self):
        if not 1 <= self.T <= self.N:
            raise ParameterError("need 1 <= T <= N")
        if len(self.d) != self.bank.D:
            raise ParameterError("d must have one entry per channel")
        if any(v < 1 for v in self.d) or sum(self.d) != self.K:
            raise ParameterError("d entries must be >= 1 and sum to K")
        if self.bank.D > self.K:
            raise ParameterError("need D <= K")
        if self.n_src < 1 or self.blocks < 1:
            raise ParameterError("n_src and blocks must be positive")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"schedule must be one of {SCHEDULES}")

    @classmethod
    def from_params(cls, N=2, T=1, K=2, d=(1, 1), channels=("bec:0.2", "bec:0.6"), **kw):
        specs = [parse_channel(c) if isinstance(c, str) else c for c in channels]
        bank = order_and_validate(specs)
        if "delta" in kw:
            kw["delta"] = Fraction(str(kw["delta"])) if isinstance(kw["delta"], float) \
                else Fraction(kw["delta"])
        return cls(int(N), int(T), int(K), tuple(int(v) for v in d), bank, **kw)

    @property
    def D(self) -> int:
        return self.bank.D

    @property
    def n_file(self) -> int:
        return self.n_src * self.blocks

    @property
    def n_pir(self) -> int:
        return self.N ** self.K

    def field_width(self) -> int:
        return self.b or pq.required_width(self.N, self.K, self.d)

    def describe(self) -> dict:
        return {"N": self.N, "T": self.T, "K": self.K, "d": list(self.d),
                "channels": [str(s) for s in self.bank.specs], "n_src": self.n_src,
                "blocks": self.blocks, "delta": str(self.delta), "b": self.field_width(),
                "backend": self.backend, "seed": self.seed, "schedule": self.schedule}


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *tags])


@dataclass(frozen=True, eq=False)
class ClientView:
    """What the client holds: public parameters, its mapping and side information."""
    instance: Instance
    mapping: Mapping
    side_info: np.ndarray  # (K, n_file)
    code: NestedCode
    b: int


@dataclass(frozen=True, eq=False)
class World:
    instance: Instance
    files: np.ndarray  # (K, n_file) bits
    mapping: Mapping
    side_info: np.ndarray
    code: NestedCode
    bins: tuple  # bins[k][l-1]: level-l bit string of file k
    databases: tuple  # LevelDatabase per level, identical at every server
    b: int

    def client_view(self) -> ClientView:
        return ClientView(self.instance, self.mapping, self.side_info, self.code, self.b)


def setup(instance: Instance) -> World:
    inst = instance
    alloc = allocate_rates(inst.bank, inst.delta, inst.n_src)
    code = build_code(inst.bank, alloc, inst.backend, seed=inst.seed)
    files = _rng(inst.seed, 1).integers(0, 2, size=(inst.K, inst.n_file), dtype=np.uint8)
    mapping = sample_mapping(inst.d, _rng(inst.seed, 2))
    srng = _rng(inst.seed, 3)
    side = np.stack([sample(inst.bank.specs[mapping[k] - 1], files[k], srng)
                     for k in range(inst.K)])
    bins = tuple(code.encode(files[k]) for k in range(inst.K))
    b = inst.field_width()
    dbs = tuple(pq.make_level_database(l, [bins[k][l - 1] for k in range(inst.K)], inst.N, b)
                for l in range(1, inst.D + 1))
    for a in (files, side):
        a.setflags(write=False)
    return World(inst, files, mapping, side, code, bins, dbs, b)


# ---- servers and transports ---------------------------------------------------

class ServerReplica:
    """A server's state: its database replica. Answers are stateless."""

    def __init__(self, databases, server_id: int):
        self.databases = {db.level: db for db in databases}
        self.server_id = server_id

    def handle_query(self, data: bytes) -> bytes:
        plan = pq.QueryPlan.from_bytes(data)
        if plan.server != self.server_id:
            raise ParameterError(f"query addressed to server {plan.server}, this is {self.server_id}")
        db = self.databases.get(plan.level)
        if db is None:
            raise ParameterError(f"no database for level {plan.level}")
        return pq.answer(plan, db).to_bytes()


class InProcessTransport:
    def __init__(self, databases, N: int):
        self.servers = [ServerReplica(databases, s) for s in range(N)]
        self.wire_bytes = 0

    def exchange(self, queries: list[bytes]) -> list[bytes]:
        return [self.servers[s].handle_query(q) for s, q in enumerate(queries)]


# ---- reports -------------------------------------------------------------------

@dataclass
class LevelReport:
    level: int
    scheme: str
    p1: int
    p2: int
    download_per_server: int
    L: int
    b: int
    info_bits: int  # bits per record at this level
    net_bits: Fraction
    gross_bits: int
    query_bytes: int
    net_cost: Fraction = Fraction(0)
    gross_cost: Fraction = Fraction(0)


@dataclass
class CostReport:
    metric: int
    n_file: int
    levels: list = field(default_factory=list)
    wire_bytes: int = 0
    decode_failures: list = field(default_factory=list)

    @property
    def levels_executed(self) -> int:
        return len(self.levels)

    @property
    def net_cost(self) -> Fraction:
        return sum((lv.net_cost for lv in self.levels), Fraction(0))

    @property
    def gross_cost(self) -> Fraction:
        return sum((lv.gross_cost for lv in self.levels), Fraction(0))

    @property
    def query_bytes(self) -> int:
        return sum(lv.query_bytes for lv in self.levels)

    def to_dict(self, wire: bool = True) -> dict:
        d = {"metric": self.metric, "n_file": self.n_file, "levels_executed": self.levels_executed,
             "net_cost": float(self.net_cost), "gross_cost": float(self.gross_cost),
             "net_cost_exact": str(self.net_cost), "gross_cost_exact": str(self.gross_cost),
             "query_bytes": self.query_bytes, "decode_failures": list(self.decode_failures),
             "levels": []}
        for lv in self.levels:
            row = asdict(lv)
            for k in ("net_bits", "net_cost", "gross_cost"):
                row[k] = str(row[k])
            d["levels"].append(row)
        if wire:
            d["wire_bytes"] = self.wire_bytes
        return d


def measure(report: CostReport, instance: Instance | None = None) -> dict:
    """Normalised costs and the per-level breakdown."""
    return {"net": float(report.net_cost), "gross": float(report.gross_cost),
            "per_level": [{"level": lv.level, "net": float(lv.net_cost),
                           "gross": float(lv.gross_cost)} for lv in report.levels]}


@dataclass
class Retrieval:
    x_hat: np.ndarray | None
    report: CostReport
    transcript: dict

    @property
    def digest(self) -> str:
        return transcript_digest(self.transcript)


def transcript_digest(transcript: dict) -> str:
    t = dict(transcript)
    t["cost"] = {k: v for k, v in t["cost"].items() if k != "wire_bytes"}
    return hashlib.sha256(json.dumps(t, sort_keys=True).encode()).hexdigest()


# ---- retrieval -------------------------------------------------------------------

def level_kind(inst: Instance, level: int, last: int) -> str:
    if inst.T == inst.N or (inst.schedule == "staged" and level < last):
        return "full"
    if inst.T != 1:
        raise ParameterError(
            f"T={inst.T} < N={inst.N} needs a T-private structure; only T=1 is implemented "
            "(use the structural cost model)")
    if inst.N < 2:
        raise ParameterError("T=1 < N requires N >= 2")
    return "sj1"


def level_schedule(inst: Instance, mapping: Mapping, z: int, metric: int) -> list[tuple]:
    """(level, structure kind, desired, known files) for each executed level.

    The desired index used in a level is z unless z is already known, in which
    case the lowest unknown file stands in for it.
    """
    last = inst.D if metric == 1 else mapping[z]
    out = []
    for level in range(1, last + 1):
        known = mapping.files_below(level)
        desired = z if z not in known else min(set(range(inst.K)) - set(known))
        out.append((level, level_kind(inst, level, last), desired, known))
    return out


def retrieve(client: ClientView, z: int, metric: int, transport, rng=None,
             strict: bool = False) -> Retrieval:
    inst, mp, code = client.instance, client.mapping, client.code
    if metric not in (1, 2):
        raise ParameterError("metric must be 1 or 2")
    if not 0 <= z < inst.K:
        raise ParameterError("z out of range")
    rng = rng if rng is not None else _rng(inst.seed, 0x51, z, metric)
    alloc = code.alloc
    N, K, b, n_pir = inst.N, inst.K, client.b, inst.n_pir
    report = CostReport(metric, inst.n_file)
    decoded: dict[int, np.ndarray] = {}
    grids: dict[tuple[int, int], np.ndarray] = {}
    levels_log = []
    for level, kind, desired, known in level_schedule(inst, mp, z, metric):
        plans, state = pq.build_level_queries(kind, level, desired, known, N, K, b, rng)
        info_bits = inst.blocks * alloc.m[level - 1]
        L = pq.symbols_per_position(info_bits, n_pir, b)
        known_records = {}
        for k in known:
            if k in decoded:
                bits = code.encode(decoded[k])[level - 1]
                known_records[k] = pq.pack_record(bits, n_pir, b)
            else:
                # Flat schedule: a file the structure treats as known was never decoded.
                report.decode_failures.append({"level": level, "file": k, "reason": "known file missing"})
                if strict:
                    raise DecodeError(f"file {k} is needed as side information at level {level} "
                                      "but was not decoded", level, k)
                known_records[k] = np.zeros((n_pir, L), dtype=np.int64)
        queries = [p.to_bytes() for p in plans]
        replies = transport.exchange(queries)
        answers = [pq.LevelAnswer.from_bytes(r) for r in replies]
        out = pq.level_decode(answers, plans, state, known_records, L)
        for f, g in out.items():
            if f not in known:
                grids[(f, level)] = g
        dl = plans[0].download
        lv = LevelReport(level, kind, plans[0].p1, plans[0].p2, dl, L, b, info_bits,
                         Fraction(N * dl * info_bits, n_pir), N * dl * L * b,
                         sum(len(q) for q in queries))
        lv.net_cost = lv.net_bits / inst.n_file
        lv.gross_cost = Fraction(lv.gross_bits, inst.n_file)
        report.levels.append(lv)
        levels_log.append({"level": level, "scheme": kind, "servers": [
            {"query_sha256": hashlib.sha256(q).hexdigest(),
             "answer_sha256": hashlib.sha256(r).hexdigest()} for q, r in zip(queries, replies)]})
        # Decode the files that live at this level once all their records are in.
        for k in mp.files_at(level):
            if not all((k, j) in grids for j in range(1, level + 1)):
                continue
            idx = [pq.unpack_record(grids[(k, j)], inst.blocks * alloc.m[j - 1], b)
                   for j in range(1, level + 1)]
            spec = inst.bank.specs[level - 1]
            x = code.decode(level, idx, client.side_info[k], spec)
            if x is None:
                report.decode_failures.append({"level": level, "file": k, "reason": "decoder abstained"})
                if strict:
                    raise DecodeError(f"decoder failed for file {k} at level {level}", level, k)
                continue
            decoded[k] = x
    report.wire_bytes = getattr(transport, "wire_bytes", 0)
    x_hat = decoded.get(z)
    if x_hat is None and not any(f["file"] == z for f in report.decode_failures):
        report.decode_failures.append({"level": mp[z], "file": z, "reason": "not retrieved"})
        if strict:
            raise DecodeError(f"desired file {z} was not retrieved", mp[z], z)
    transcript = {"instance": inst.describe(), "seed": inst.seed, "z": z, "metric": metric,
                  "levels": levels_log, "cost": report.to_dict()}
    return Retrieval(x_hat, report, transcript)


def retrieve_metric1(world: World, z: int, transport=None, rng=None, strict=False):
    if z not in admissible_z(world.mapping, 1, world.instance.bank):
        raise ParameterError(f"z={z} is not admissible under metric 1")
    t = transport or InProcessTransport(world.databases, world.instance.N)
    r = retrieve(world.client_view(), z, 1, t, rng, strict)
    return r.x_hat, r.report


def retrieve_metric2(world: World, z: int, transport=None, rng=None, strict=False):
    t = transport or InProcessTransport(world.databases, world.instance.N)
    r = retrieve(world.client_view(), z, 2, t, rng, strict)
    return r.x_hat, r.report


# ---- batches -------------------------------------------------------------------------

def trial_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1, np.uint64)[0] >> 1)


def draw_z(world: World, metric: int, rng) -> int:
    return int(rng.choice(admissible_z(world.mapping, metric, world.instance.bank)))


@dataclass
class TrialResult:
    seed: int
    z: int
    level_of_z: int
    success: dict  # metric -> bool
    net_cost: dict  # metric -> Fraction
    gross_cost: dict


def run_trials(instance: Instance, trials: int, metrics=(1, 2)) -> list[TrialResult]:
    """Fresh world per trial; both metrics share the world and z."""
    from dataclasses import replace

    out = []
    for i in range(trials):
        inst = replace(instance, seed=trial_seed(instance.seed, i))
        w = setup(inst)
        z = draw_z(w, 1 if 1 in metrics else 2, _rng(inst.seed, 0x7A))
        succ, net, gross = {}, {}, {}
        for m in metrics:
            r = retrieve(w.client_view(), z, m, InProcessTransport(w.databases, inst.N))
            succ[m] = r.x_hat is not None and np.array_equal(r.x_hat, w.files[z])
            net[m], gross[m] = r.report.net_cost, r.report.gross_cost
        out.append(TrialResult(inst.seed, z, w.mapping[z], succ, net, gross))
    return out
