"""Length-prefixed TCP framing, server daemon and networked client transport."""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import pirquery as pq
from .errors import ParameterError, TransportError

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 26
HELLO, QUERY, ANSWER, ERROR, SETUP = 0x01, 0x02, 0x03, 0x04, 0x05
FRAME_TYPES = {HELLO, QUERY, ANSWER, ERROR, SETUP}
FRAME_OVERHEAD = 5

ERR_OVERSIZE, ERR_MALFORMED, ERR_UNPROVISIONED, ERR_QUERY = 0x01, 0x02, 0x03, 0x04

_HDR = struct.Struct(">IB")
DB_MAGIC = b"PIRNSI01"
_DB_HDR = struct.Struct("<HHHBBI")  # version, K, D, b, reserved, n_pir
_DB_LVL = struct.Struct("<HII")  # level, L, info bits


# ---- frames --------------------------------------------------------------------

def encode_frame(ftype: int, payload: bytes = b"") -> bytes:
    if ftype not in FRAME_TYPES:
        raise ParameterError(f"unknown frame type {ftype:#x}")
    if len(payload) > MAX_FRAME:
        raise ParameterError("frame payload exceeds 2^26 bytes")
    return _HDR.pack(len(payload), ftype) + payload


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def _discard(sock, n: int) -> None:
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        n -= len(chunk)


def read_frame(sock) -> tuple[int, bytes | None]:
    """Returns (type, payload). Oversized payloads are drained and returned as None."""
    hdr = sock.recv(_HDR.size, socket.MSG_WAITALL)
    if not hdr:
        raise EOFError
    if len(hdr) < _HDR.size:
        hdr += _recv_exact(sock, _HDR.size - len(hdr))
    length, ftype = _HDR.unpack(hdr)
    if length > MAX_FRAME:
        _discard(sock, length)
        return ftype, None
    return ftype, _recv_exact(sock, length)


def error_payload(code: int, msg: str) -> bytes:
    return bytes([code]) + msg.encode("utf-8")[:1024]


# ---- database files -------------------------------------------------------------

def dump_databases(databases) -> bytes:
    dbs = list(databases)
    K, n_pir, b = dbs[0].K, dbs[0].n_pir, dbs[0].b
    out = [DB_MAGIC, _DB_HDR.pack(1, K, len(dbs), b, 0, n_pir)]
    dt = "<u1" if b <= 8 else "<u2"
    for db in dbs:
        out.append(_DB_LVL.pack(db.level, db.L, db.bits))
        out.append(np.ascontiguousarray(db.records, dtype=dt).tobytes())
    return b"".join(out)


def load_databases(data: bytes) -> tuple:
    if data[:8] != DB_MAGIC:
        raise ParameterError("not a database file (bad magic)")
    off = 8
    ver, K, D, b, _, n_pir = _DB_HDR.unpack_from(data, off)
    off += _DB_HDR.size
    if ver != 1:
        raise ParameterError(f"unsupported database version {ver}")
    width = 1 if b <= 8 else 2
    out = []
    for _ in range(D):
        level, L, bits = _DB_LVL.unpack_from(data, off)
        off += _DB_LVL.size
        n = K * n_pir * L
        recs = np.frombuffer(data, dtype="<u1" if width == 1 else "<u2", count=n, offset=off)
        off += n * width
        recs = recs.reshape(K, n_pir, L).astype(np.int64)
        recs.setflags(write=False)
        out.append(pq.LevelDatabase(level, b, recs, bits))
    if off != len(data):
        raise ParameterError("trailing bytes in database file")
    return tuple(out)


# ---- server ----------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: PirServer = self.server  # type: ignore[assignment]
        sock = self.request
        while True:
            try:
                ftype, payload = read_frame(sock)
            except (EOFError, ConnectionError, OSError):
                return
            reply = srv.dispatch(ftype, payload)
            try:
                sock.sendall(reply)
            except OSError:
                return


class PirServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, port: int, databases=None, server_id: int = 0, host: str = "127.0.0.1"):
        super().__init__((host, port), _Handler)
        self.server_id = server_id
        self._lock = threading.Lock()
        self._replica = None
        if databases is not None:
            self.provision(databases)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def provision(self, databases) -> None:
        from .protocol import ServerReplica

        with self._lock:
            self._replica = ServerReplica(databases, self.server_id)

    def dispatch(self, ftype: int, payload: bytes | None) -> bytes:
        if payload is None:
            return encode_frame(ERROR, error_payload(ERR_OVERSIZE, "frame exceeds 2^26 bytes"))
        try:
            if ftype == HELLO:
                return encode_frame(HELLO, struct.pack(">H", PROTOCOL_VERSION))
            if ftype == SETUP:
                self.provision(load_databases(payload))
                return encode_frame(SETUP, b"")
            if ftype == QUERY:
                with self._lock:
                    rep = self._replica
                if rep is None:
                    return encode_frame(ERROR, error_payload(ERR_UNPROVISIONED, "no database loaded"))
                return encode_frame(ANSWER, rep.handle_query(payload))
            return encode_frame(ERROR, error_payload(ERR_MALFORMED, f"unexpected frame type {ftype:#x}"))
        except (ParameterError, ValueError, struct.error) as exc:
            code = ERR_QUERY if ftype == QUERY else ERR_MALFORMED
            return encode_frame(ERROR, error_payload(code, str(exc)))


def serve(port: int, databases, server_id: int, host: str = "127.0.0.1", ready=None) -> None:
    """Run a server until shutdown. `ready` is called with the bound port."""
    with PirServer(port, databases, server_id, host) as srv:
        if ready:
            ready(srv.port)
        srv.serve_forever()


def start_background(databases, server_id: int, port: int = 0) -> PirServer:
    srv = PirServer(port, databases, server_id)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv


# ---- client ------------------------------------------------------------------------

@dataclass
class Endpoint:
    host: str
    port: int


class Connection:
    def __init__(self, ep: Endpoint, timeout: float = 30.0):
        try:
            self.sock = socket.create_connection((ep.host, ep.port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach {ep.host}:{ep.port}: {exc}") from exc
        self.sent = self.received = 0

    def request(self, ftype: int, payload: bytes = b"") -> tuple[int, bytes]:
        frame = encode_frame(ftype, payload)
        try:
            self.sock.sendall(frame)
            rtype, data = read_frame(self.sock)
        except (OSError, EOFError) as exc:
            raise TransportError(f"server connection failed: {exc}") from exc
        self.sent += len(frame)
        self.received += FRAME_OVERHEAD + len(data or b"")
        if rtype == ERROR:
            raise TransportError(f"server error {data[0]:#04x}: {data[1:].decode('utf-8', 'replace')}")
        return rtype, data

    def hello(self) -> int:
        _, data = self.request(HELLO, struct.pack(">H", PROTOCOL_VERSION))
        return struct.unpack(">H", data)[0]

    def close(self):
        self.sock.close()


class RemoteTransport:
    """Fans each level's queries out to the N servers concurrently."""

    def __init__(self, endpoints):
        self.conns = [Connection(ep if isinstance(ep, Endpoint) else Endpoint(*ep))
                      for ep in endpoints]
        for c in self.conns:
            if c.hello() != PROTOCOL_VERSION:
                raise TransportError("protocol version mismatch")
        self.pool = ThreadPoolExecutor(max_workers=len(self.conns))
        self.answer_bytes = 0

    @property
    def wire_bytes(self) -> int:
        return sum(c.sent + c.received for c in self.conns)

    def provision(self, databases) -> None:
        blob = dump_databases(databases)
        for c in self.conns:
            c.request(SETUP, blob)

    def exchange(self, queries: list[bytes]) -> list[bytes]:
        futs = [self.pool.submit(c.request, QUERY, q) for c, q in zip(self.conns, queries)]
        out = []
        for f in futs:
            rtype, data = f.result()
            if rtype != ANSWER:
                raise TransportError(f"expected ANSWER, got frame {rtype:#x}")
            out.append(data)
            self.answer_bytes += len(data)
        return out

    def close(self):
        for c in self.conns:
            c.close()
        self.pool.shutdown(wait=False)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_retrieve(endpoints, client, z: int, metric: int, rng=None, strict: bool = False):
    """Run the retrieval over sockets. Returns a protocol.Retrieval."""
    from .protocol import retrieve

    if len(endpoints) != client.instance.N:
        raise ParameterError("need one endpoint per server")
    with RemoteTransport(endpoints) as t:
        return retrieve(client, z, metric, t, rng, strict)
