"""Arithmetic over GF(2^b) and systematic MDS codes built from Vandermonde matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import CorruptionError, ParameterError

# Fixed reducing polynomials, one per width. 0x11B is the AES polynomial; the
# rest are the usual primitive trinomials/pentanomials.
POLYNOMIALS = {
    2: 0x7, 3: 0xB, 4: 0x13, 5: 0x25, 6: 0x43, 7: 0x83, 8: 0x11B,
    9: 0x211, 10: 0x409, 11: 0x805, 12: 0x1053, 13: 0x201B,
    14: 0x4443, 15: 0x8003, 16: 0x1100B,
}


def clmul_reduce(a: int, b: int, poly: int, width: int) -> int:
    """Carry-less multiply followed by reduction. Slow reference path."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a >> width:
            a ^= poly
    return r


@dataclass(frozen=True, eq=False)
class Field:
    b: int
    poly: int
    generator: int
    exp: np.ndarray = field(repr=False)
    log: np.ndarray = field(repr=False)

    @property
    def order(self) -> int:
        return 1 << self.b

    @property
    def dtype(self):
        return np.uint8 if self.b <= 8 else np.uint16

    def mul(self, a, b):
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        out = self.exp[self.log[a] + self.log[b]]
        return np.where((a == 0) | (b == 0), 0, out).astype(np.int64)

    def inv(self, a):
        a = np.asarray(a, dtype=np.int64)
        if np.any(a == 0):
            raise ZeroDivisionError("zero has no inverse")
        return self.exp[(self.order - 1 - self.log[a]) % (self.order - 1)]

    def power(self, e: int) -> int:
        return int(self.exp[e % (self.order - 1)])

    def matmul(self, A, B):
        """Product over the field. B may carry trailing vector columns."""
        A = np.asarray(A, dtype=np.int64)
        B = np.asarray(B, dtype=np.int64)
        out = np.zeros((A.shape[0],) + B.shape[1:], dtype=np.int64)
        for k in range(A.shape[1]):
            col = A[:, k].reshape((-1,) + (1,) * (B.ndim - 1))
            out ^= self.mul(col, B[k][None, ...])
        return out

    def solve(self, A, B):
        """Solve A X = B for square invertible A. Raises on singular A."""
        A = np.array(A, dtype=np.int64)
        X = np.array(B, dtype=np.int64)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("square system required")
        for c in range(n):
            piv = next((r for r in range(c, n) if A[r, c]), None)
            if piv is None:
                raise np.linalg.LinAlgError("singular matrix over GF(2^b)")
            if piv != c:
                A[[c, piv]] = A[[piv, c]]
                X[[c, piv]] = X[[piv, c]]
            s = self.inv(A[c, c])
            A[c] = self.mul(s, A[c])
            X[c] = self.mul(s, X[c])
            rows = np.flatnonzero(A[:, c])
            rows = rows[rows != c]
            if rows.size:
                f = A[rows, c]
                A[rows] ^= self.mul(f[:, None], A[c][None, :])
                shape = (-1,) + (1,) * (X.ndim - 1)
                X[rows] ^= self.mul(f.reshape(shape), X[c][None, ...])
        return X

    def inverse_matrix(self, A):
        n = np.asarray(A).shape[0]
        return self.solve(A, np.eye(n, dtype=np.int64))


def _is_primitive(g: int, exp_order: int, poly: int, width: int) -> bool:
    x, seen = 1, 0
    for i in range(exp_order):
        x = clmul_reduce(x, g, poly, width)
        seen += 1
        if x == 1:
            return seen == exp_order
    return False


@lru_cache(maxsize=None)
def field_new(b: int = 8) -> Field:
    """Build GF(2^b) with the published polynomial for width b."""
    if not isinstance(b, int) or not 2 <= b <= 16:
        raise ParameterError(f"field width must satisfy 2 <= b <= 16, got {b!r}")
    poly, q = POLYNOMIALS[b], 1 << b
    g = next(g for g in range(2, q) if _is_primitive(g, q - 1, poly, b))
    exp = np.zeros(2 * q, dtype=np.int64)
    log = np.zeros(q, dtype=np.int64)
    x = 1
    for i in range(q - 1):
        exp[i] = x
        log[x] = i
        x = clmul_reduce(x, g, poly, b)
    exp[q - 1:2 * (q - 1)] = exp[:q - 1]
    # log[0] is a dummy; mul masks zeros explicitly.
    return Field(b, poly, g, exp, log)


def width_for(points: int, b: int = 8) -> int:
    """Smallest standard width (8, then 16) holding `points` distinct nonzero elements."""
    for w in (b, 16):
        if points <= (1 << w) - 1:
            return w
    raise ParameterError(f"{points} evaluation points exceed GF(2^16)")


@dataclass(frozen=True, eq=False)
class MdsParity:
    p1: int
    p2: int
    field: Field
    V: np.ndarray = field(repr=False)  # p1 x (p1 - p2)

    @property
    def generator(self) -> np.ndarray:
        """Full (2p1 - p2) x p1 generator [V | I]^T: parity rows first."""
        return np.vstack([self.V.T, np.eye(self.p1, dtype=np.int64)])


@lru_cache(maxsize=256)
def mds_parity(p1: int, p2: int, fld: Field) -> MdsParity:
    if not 0 <= p2 < p1:
        raise ParameterError(f"need 0 <= p2 < p1, got p1={p1}, p2={p2}")
    n = 2 * p1 - p2
    if n > fld.order - 1:
        raise ParameterError(
            f"GF(2^{fld.b}) has {fld.order - 1} nonzero points but {n} are needed; use a larger b")
    pts = np.array([fld.power(i) for i in range(n)], dtype=np.int64)
    vd = np.ones((n, p1), dtype=np.int64)
    for j in range(1, p1):
        vd[:, j] = fld.mul(vd[:, j - 1], pts)
    # Systematic form: G = Vd * inv(bottom p1 rows), so the bottom block is I.
    top = fld.matmul(vd[: n - p1], fld.inverse_matrix(vd[n - p1:]))
    V = top.T.copy()
    V.setflags(write=False)
    return MdsParity(p1, p2, fld, V)


def mds_encode(parity: MdsParity, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.int64)
    if u.shape[0] != parity.p1:
        raise ParameterError(f"expected {parity.p1} symbols, got {u.shape[0]}")
    return parity.field.matmul(parity.V.T, u)


def mds_recover(parity: MdsParity, known_positions, known_values, parity_out) -> np.ndarray:
    """Rebuild u from its known systematic symbols and the downloaded parity."""
    fld, p1 = parity.field, parity.p1
    pos = [int(p) for p in known_positions]
    kv = np.asarray(known_values, dtype=np.int64)
    po = np.asarray(parity_out, dtype=np.int64)
    if len(pos) != len(set(pos)) or any(not 0 <= p < p1 for p in pos):
        raise ParameterError("known positions must be distinct systematic indices")
    if len(pos) < parity.p2 or po.shape[0] != p1 - parity.p2 or kv.shape[0] != len(pos):
        raise ParameterError("symbol counts do not match the parity code")
    G = parity.generator
    rows = list(range(p1 - parity.p2)) + [p1 - parity.p2 + p for p in pos]
    rhs = np.concatenate([po, kv], axis=0)
    sel = rows[:p1]
    u = fld.solve(G[sel], rhs[:p1])
    # Extra knowns over-determine the system; use them as a consistency check.
    if len(rows) > p1 and not np.array_equal(fld.matmul(G[rows[p1:]], u), rhs[p1:]):
        raise CorruptionError("parity and known symbols are inconsistent")
    return u
