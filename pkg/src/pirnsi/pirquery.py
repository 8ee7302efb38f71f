"""Per-level PIR engine: k-sum counts, query structures, answers, redundancy removal, decoding.

A level database holds K records of n_pir = N^K grid positions. Each position
carries a vector of L field symbols, so one query grid serves a whole record.

Two query structures are implemented:

* ``sj1``: the T=1 k-sum structure. Each server receives, for every non-empty
  subset S of files, (N-1)^{|S|-1} sums of one symbol per file in S. Sums that
  contain the desired file reuse a side sum downloaded from another server.
* ``full``: the T=N structure. Each server returns a disjoint 1/N share of
  every record, which retrieves all records.

Both reduce to position lists drawn through private uniform permutations, one
per file, so the query a server sees is independent of the desired index.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from math import comb

import numpy as np

from .errors import CorruptionError, ParameterError
from .gf import Field, field_new, mds_encode, mds_parity, mds_recover

ABSENT = -1
FLAG_MDS = 0x01
_PLAN_HDR = struct.Struct("<HHIIBBH")
_ANS_HDR = struct.Struct("<HHIIBBH")
_SLOT = np.dtype([("pos", "<u4"), ("coef", "<u2")])
_NONE_POS = 0xFFFFFFFF


# ---- counts ----------------------------------------------------------------

def _check_ntk(N: int, T: int, K: int) -> None:
    if not (1 <= T <= N and K >= 1):
        raise ParameterError(f"need 1 <= T <= N and K >= 1, got N={N}, T={T}, K={K}")


def ksum_counts(N: int, T: int, K: int, k: int) -> tuple[int, int]:
    """(types, instances per type) of the k-sums in one server's query."""
    _check_ntk(N, T, K)
    if not 1 <= k <= K:
        raise ParameterError(f"need 1 <= k <= K, got k={k}")
    return comb(K, k), (N - T) ** (k - 1) * T ** (K - k)


def p_counts(N: int, T: int, K: int, d_prefix: int) -> tuple[int, int]:
    """(p1, p2): symbols per server before removal, and how many are already known."""
    _check_ntk(N, T, K)
    if not 0 <= d_prefix < K:
        raise ParameterError(f"need 0 <= d_prefix < K, got {d_prefix}")
    if N == T:
        return K * N ** (K - 1), d_prefix * N ** (K - 1)
    p1 = (N ** K - T ** K) // (N - T)
    p2 = T ** (K - d_prefix) * (N ** d_prefix - T ** d_prefix) // (N - T)
    return p1, p2


# ---- structures (identity permutations) -----------------------------------

@dataclass(frozen=True, eq=False)
class Structure:
    """Query layout with symbol indices in place of positions.

    idx[s] is a (p1, K) array of per-file symbol indices (ABSENT when the file is
    not in the sum). recover[s] lists, for each answer slot that yields a
    record symbol, (slot, file, symbol index, ref_server, ref_slot); the
    reference is the side sum to subtract, or -1.
    """
    kind: str
    N: int
    K: int
    desired: int
    idx: tuple
    recover: tuple

    @property
    def p1(self) -> int:
        return self.idx[0].shape[0]


def _sj1(N: int, K: int, desired: int) -> Structure:
    counter = [0] * K
    slots = [[] for _ in range(N)]  # lists of dict file->symbol
    recover = [[] for _ in range(N)]
    # side[(s, type)] -> slot numbers of the side sums of that type at server s
    side: dict = {}

    def fresh(f):
        counter[f] += 1
        return counter[f] - 1

    for k in range(1, K + 1):
        for s in range(N):
            for S in combinations(range(K), k):
                if desired not in S:
                    for _ in range((N - 1) ** (k - 1)):
                        side.setdefault((s, S), []).append(len(slots[s]))
                        slots[s].append({f: fresh(f) for f in S})
                    continue
                rest = tuple(f for f in S if f != desired)
                refs = [(-1, -1)] if not rest else [
                    (t, slot) for t in range(N) if t != s for slot in side.get((t, rest), [])]
                for rs, rslot in refs:
                    j = fresh(desired)
                    entry = {f: slots[rs][rslot][f] for f in rest}
                    entry[desired] = j
                    recover[s].append((len(slots[s]), desired, j, rs, rslot))
                    slots[s].append(entry)
    idx = []
    for s in range(N):
        a = np.full((len(slots[s]), K), ABSENT, dtype=np.int64)
        for i, e in enumerate(slots[s]):
            for f, j in e.items():
                a[i, f] = j
        idx.append(a)
    return Structure("sj1", N, K, desired, tuple(idx), tuple(tuple(r) for r in recover))


def _full(N: int, K: int, desired: int) -> Structure:
    per = N ** (K - 1)
    idx, recover = [], []
    for s in range(N):
        a = np.full((K * per, K), ABSENT, dtype=np.int64)
        rec = []
        for f in range(K):
            for i in range(per):
                a[f * per + i, f] = s * per + i
                rec.append((f * per + i, f, s * per + i, -1, -1))
        idx.append(a)
        recover.append(tuple(rec))
    return Structure("full", N, K, desired, tuple(idx), tuple(recover))


SCHEMES = {"sj1": _sj1, "full": _full}


@lru_cache(maxsize=256)
def level_structure(kind: str, N: int, K: int, desired: int) -> Structure:
    if kind not in SCHEMES:
        raise ParameterError(f"unknown level scheme {kind!r}")
    if not 0 <= desired < K or N < 1:
        raise ParameterError("desired file out of range")
    return SCHEMES[kind](N, K, desired)


def known_slots(structure: Structure, server: int, known_files) -> np.ndarray:
    """Slots whose every file is already known to the client."""
    a = structure.idx[server]
    known = np.zeros(structure.K, dtype=bool)
    known[list(known_files)] = True
    present = a != ABSENT
    return np.flatnonzero(present.any(axis=1) & ~(present & ~known[None, :]).any(axis=1))


# ---- plans -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QueryPlan:
    """What one server receives: positions and coefficients per sum."""
    level: int
    server: int
    K: int
    b: int
    positions: np.ndarray  # (p1, K), ABSENT where a file is not summed
    coeffs: np.ndarray  # (p1, K)
    p2: int  # sums the client already knows; >0 switches on parity download

    @property
    def p1(self) -> int:
        return self.positions.shape[0]

    @property
    def download(self) -> int:
        return self.p1 - self.p2

    def to_bytes(self) -> bytes:
        flags = FLAG_MDS if self.p2 else 0
        hdr = _PLAN_HDR.pack(self.level, self.server, self.p1, self.download, self.b, flags, self.K)
        body = np.zeros(self.positions.shape, dtype=_SLOT)
        body["pos"] = np.where(self.positions == ABSENT, _NONE_POS, self.positions)
        body["coef"] = np.where(self.positions == ABSENT, 0, self.coeffs)
        return hdr + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QueryPlan":
        if len(data) < _PLAN_HDR.size:
            raise ParameterError("query plan truncated")
        level, server, p1, download, b, flags, K = _PLAN_HDR.unpack_from(data)
        if len(data) != _PLAN_HDR.size + p1 * K * _SLOT.itemsize:
            raise ParameterError("query plan length does not match its header")
        if download > p1 or (bool(flags & FLAG_MDS) != (download < p1)):
            raise ParameterError("inconsistent removal flag")
        body = np.frombuffer(data, dtype=_SLOT, offset=_PLAN_HDR.size).reshape(p1, K)
        pos = body["pos"].astype(np.int64)
        pos[pos == _NONE_POS] = ABSENT
        return cls(level, server, K, b, pos, body["coef"].astype(np.int64), p1 - download)


@dataclass(frozen=True, eq=False)
class ClientLevelState:
    """Everything the client keeps private about one level's queries."""
    level: int
    structure: Structure
    perms: tuple  # K arrays of length n_pir
    known_files: tuple
    b: int


def plans_from_perms(structure: Structure, perms, level: int, known_files, b: int,
                     servers=None) -> list[QueryPlan]:
    """Apply per-file position permutations to a structure: one plan per server."""
    out = []
    for s in (range(structure.N) if servers is None else servers):
        a = structure.idx[s]
        pos = np.full(a.shape, ABSENT, dtype=np.int64)
        for f in range(structure.K):
            m = a[:, f] != ABSENT
            pos[m, f] = np.asarray(perms[f])[a[m, f]]
        coeffs = (pos != ABSENT).astype(np.int64)
        p2 = len(known_slots(structure, s, known_files))
        out.append(QueryPlan(level, s, structure.K, b, pos, coeffs, p2))
    return out


def build_level_queries(kind: str, level: int, desired: int, known_files, N: int, K: int,
                        b: int, rng: np.random.Generator):
    """Draw fresh permutations and build one plan per server.

    Only public parameters, the desired index and the known-file set go in; no
    side-information values are visible here.
    """
    known_files = tuple(sorted(known_files))
    if desired in known_files:
        raise ParameterError("desired file must not be among the known files")
    st = level_structure(kind, N, K, desired)
    n_pir = N ** K
    perms = tuple(rng.permutation(n_pir) for _ in range(K))
    plans = plans_from_perms(st, perms, level, known_files, b)
    return plans, ClientLevelState(level, st, perms, known_files, b)


def build_level_queries_T1(level: int, desired: int, known_files, N: int, K: int, b: int,
                           rng: np.random.Generator, T: int = 1):
    if T != 1:
        raise ParameterError("full query construction exists for T=1 only; "
                             "use structural_cost_model for other T")
    if N < 2:
        raise ParameterError("the T=1 structure needs N >= 2")
    return build_level_queries("sj1", level, desired, known_files, N, K, b, rng)


# ---- databases and answers --------------------------------------------------

@dataclass(frozen=True, eq=False)
class LevelDatabase:
    level: int
    b: int
    records: np.ndarray  # (K, n_pir, L) symbols
    bits: int  # information bits per record

    @property
    def K(self) -> int:
        return self.records.shape[0]

    @property
    def n_pir(self) -> int:
        return self.records.shape[1]

    @property
    def L(self) -> int:
        return self.records.shape[2]

    @property
    def pad_bits(self) -> int:
        return self.n_pir * self.L * self.b - self.bits


def symbols_per_position(bits: int, n_pir: int, b: int) -> int:
    return -(-bits // (n_pir * b))


def pack_record(bits, n_pir: int, b: int) -> np.ndarray:
    """Big-endian bit packing into an (n_pir, L) symbol grid, zero padded."""
    bits = np.asarray(bits, dtype=np.int64)
    L = symbols_per_position(bits.size, n_pir, b)
    padded = np.zeros(n_pir * L * b, dtype=np.int64)
    padded[: bits.size] = bits
    weights = 1 << np.arange(b - 1, -1, -1, dtype=np.int64)
    return (padded.reshape(-1, b) @ weights).reshape(n_pir, L)


def unpack_record(symbols, nbits: int, b: int) -> np.ndarray:
    s = np.asarray(symbols, dtype=np.int64).reshape(-1)
    bits = (s[:, None] >> np.arange(b - 1, -1, -1)) & 1
    return bits.reshape(-1)[:nbits].astype(np.uint8)


def make_level_database(level: int, records_bits, N: int, b: int) -> LevelDatabase:
    K = len(records_bits)
    n_pir = N ** K
    nbits = {len(r) for r in records_bits}
    if len(nbits) != 1:
        raise ParameterError("all records at a level must have the same length")
    recs = np.stack([pack_record(r, n_pir, b) for r in records_bits])
    recs.setflags(write=False)
    return LevelDatabase(level, b, recs, nbits.pop())


@dataclass(frozen=True, eq=False)
class LevelAnswer:
    level: int
    server: int
    b: int
    symbols: np.ndarray  # (download, L)
    digest: bytes

    def _payload(self) -> bytes:
        dt = "<u1" if self.b <= 8 else "<u2"
        return np.ascontiguousarray(self.symbols, dtype=dt).tobytes()

    def verify(self) -> None:
        if hashlib.sha256(self._payload()).digest() != self.digest:
            raise CorruptionError(f"answer from server {self.server} fails its digest check")

    def to_bytes(self) -> bytes:
        c, L = self.symbols.shape
        return _ANS_HDR.pack(self.level, self.server, c, L, self.b, 0, 0) + self._payload() + self.digest

    @classmethod
    def from_bytes(cls, data: bytes) -> "LevelAnswer":
        if len(data) < _ANS_HDR.size + 32:
            raise ParameterError("answer truncated")
        level, server, c, L, b, _, _ = _ANS_HDR.unpack_from(data)
        width = 1 if b <= 8 else 2
        if len(data) != _ANS_HDR.size + c * L * width + 32:
            raise ParameterError("answer length does not match its header")
        sym = np.frombuffer(data, dtype="<u1" if width == 1 else "<u2", offset=_ANS_HDR.size,
                            count=c * L).reshape(c, L).astype(np.int64)
        return cls(level, server, b, sym, data[-32:])


def seal_answer(level: int, server: int, b: int, symbols: np.ndarray) -> LevelAnswer:
    a = LevelAnswer(level, server, b, np.asarray(symbols, dtype=np.int64), b"")
    return LevelAnswer(level, server, b, a.symbols, hashlib.sha256(a._payload()).digest())


def evaluate_sums(fld: Field, positions, coeffs, records) -> np.ndarray:
    """Linear combinations sum_f c_f * record_f[pos_f] for every row."""
    p1, K = positions.shape
    U = np.zeros((p1, records.shape[2]), dtype=np.int64)
    for f in range(K):
        m = positions[:, f] != ABSENT
        if not m.any():
            continue
        vals = records[f, positions[m, f]].astype(np.int64)
        c = coeffs[m, f]
        U[m] ^= vals if np.all(c == 1) else fld.mul(c[:, None], vals)
    return U


def answer(plan: QueryPlan, db: LevelDatabase) -> LevelAnswer:
    if plan.level != db.level or plan.b != db.b or plan.K != db.K:
        raise ParameterError("plan and database disagree on level, field or K")
    if plan.positions.size and plan.positions.max() >= db.n_pir:
        raise ParameterError("query position out of range")
    fld = field_new(plan.b)
    U = evaluate_sums(fld, plan.positions, plan.coeffs, db.records)
    if plan.p2:
        U = mds_encode(mds_parity(plan.p1, plan.p2, fld), U)
    return seal_answer(plan.level, plan.server, plan.b, U)


def level_decode(answers, plans, state: ClientLevelState, known_records: dict,
                 L: int) -> dict:
    """Recover record grids from the answers of all servers.

    known_records maps file -> (n_pir, L) grid for every known file. Returns a
    dict file -> grid for each file whose record is now fully available.
    """
    st = state.structure
    fld = field_new(state.b)
    if len(answers) != st.N or len(plans) != st.N:
        raise ParameterError("need one answer and one plan per server")
    if set(known_records) != set(state.known_files):
        raise ParameterError("known records do not match the plan's known-file set")
    U = []
    for s, (ans, plan) in enumerate(zip(answers, plans)):
        ans.verify()
        if (ans.level, ans.server, ans.b) != (plan.level, s, plan.b) \
                or ans.symbols.shape != (plan.download, L):
            raise CorruptionError(f"answer from server {s} does not fit its query")
        if plan.p2:
            ks = known_slots(st, s, state.known_files)
            kv = evaluate_sums(fld, plan.positions[ks], plan.coeffs[ks],
                               _stack_known(known_records, st.K, L))
            U.append(mds_recover(mds_parity(plan.p1, plan.p2, fld), ks, kv, ans.symbols))
        else:
            U.append(ans.symbols)
    n_pir = st.N ** st.K
    out = {f: np.asarray(g) for f, g in known_records.items()}
    grids, filled = {}, {}
    for s in range(st.N):
        for slot, f, j, rs, rslot in st.recover[s]:
            v = U[s][slot] if rs < 0 else U[s][slot] ^ U[rs][rslot]
            g = grids.setdefault(f, np.zeros((n_pir, L), dtype=np.int64))
            g[state.perms[f][j]] = v
            filled[f] = filled.get(f, 0) + 1
    for f, g in grids.items():
        if filled[f] == n_pir:
            out[f] = g
    return out


def _stack_known(known_records, K, L):
    n_pir = next(iter(known_records.values())).shape[0]
    recs = np.zeros((K, n_pir, L), dtype=np.int64)
    for f, g in known_records.items():
        recs[f] = g
    return recs


# ---- cost models -----------------------------------------------------------

@dataclass(frozen=True)
class LevelCost:
    level: int
    p1: int
    p2: int
    downloaded_symbols: int  # over all N servers, per grid position vector
    rate: object  # Fraction cost of this level, normalised by the file length


def structural_cost_model(N: int, T: int, K: int, d, rates) -> list[LevelCost]:
    """Per-level costs when every level runs the (N, T) structure with known set M^{-1}([l-1])."""
    from fractions import Fraction

    out, prefix = [], 0
    for l, (dl, R) in enumerate(zip(d, rates), start=1):
        p1, p2 = p_counts(N, T, K, prefix)
        out.append(LevelCost(l, p1, p2, N * (p1 - p2),
                             Fraction(R) * N * (p1 - p2) / N ** K))
        prefix += dl
    return out


def staged_cost_model(N: int, T: int, K: int, d, rates, last: int) -> list[LevelCost]:
    """Costs of the staged schedule: T=N structure below `last`, (N, T) structure at `last`."""
    from fractions import Fraction

    out, prefix = [], 0
    for l in range(1, last + 1):
        t = T if l == last else N
        p1, p2 = p_counts(N, t, K, prefix)
        out.append(LevelCost(l, p1, p2, N * (p1 - p2),
                             Fraction(rates[l - 1]) * N * (p1 - p2) / N ** K))
        prefix += d[l - 1]
    return out


def required_width(N: int, K: int, d, b: int = 8) -> int:
    """Field width large enough for every parity code either structure may need."""
    from .gf import width_for

    worst, prefix = 1, 0
    for dl in d:
        for t in {1, N}:
            p1, p2 = p_counts(N, t, K, prefix)
            worst = max(worst, 2 * p1 - p2)
        prefix += dl
    return width_for(worst, b)
