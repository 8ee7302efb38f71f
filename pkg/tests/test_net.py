import socket
import struct

import numpy as np
import pytest

from pirnsi import net
from pirnsi import protocol as pr
from pirnsi.errors import ParameterError, TransportError


@pytest.fixture(scope="module")
def world():
    return pr.setup(pr.Instance.from_params(n_src=256, delta="0.3", seed=5))


@pytest.fixture()
def servers(world):
    srv = [net.start_background(world.databases, s) for s in range(2)]
    yield srv
    for s in srv:
        s.shutdown()
        s.server_close()


def _raw(port):
    return socket.create_connection(("127.0.0.1", port), timeout=5)


def test_frame_encoding():
    assert net.encode_frame(net.HELLO, b"ab") == b"\x00\x00\x00\x02\x01ab"
    with pytest.raises(ParameterError):
        net.encode_frame(0x09, b"")


def test_hello_echo(servers):
    c = net.Connection(net.Endpoint("127.0.0.1", servers[0].port))
    assert c.hello() == 1
    c.close()


def test_oversized_frame_gets_error_and_connection_survives(servers):
    s = _raw(servers[0].port)
    n = net.MAX_FRAME + 1
    s.sendall(struct.pack(">IB", n, net.QUERY))
    chunk = b"\0" * (1 << 20)
    sent = 0
    while sent < n:
        k = min(len(chunk), n - sent)
        s.sendall(chunk[:k])
        sent += k
    ftype, data = net.read_frame(s)
    assert ftype == net.ERROR and data[0] == net.ERR_OVERSIZE
    s.sendall(net.encode_frame(net.HELLO, struct.pack(">H", 1)))
    assert net.read_frame(s)[0] == net.HELLO
    s.close()


def test_malformed_query_is_reported(servers):
    s = _raw(servers[0].port)
    s.sendall(net.encode_frame(net.QUERY, b"\x01\x02"))
    ftype, data = net.read_frame(s)
    assert ftype == net.ERROR and data[0] == net.ERR_QUERY
    s.sendall(net.encode_frame(net.ANSWER, b""))
    ftype, data = net.read_frame(s)
    assert ftype == net.ERROR and data[0] == net.ERR_MALFORMED
    s.close()


def test_unprovisioned_server():
    srv = net.start_background(None, 0)
    try:
        c = net.Connection(net.Endpoint("127.0.0.1", srv.port))
        with pytest.raises(TransportError, match="0x03"):
            c.request(net.QUERY, b"x" * 20)
        c.close()
    finally:
        srv.shutdown()
        srv.server_close()


def test_loopback_query_matches_in_process(world, servers):
    from pirnsi import pirquery as pq

    plans, _ = pq.build_level_queries("sj1", 2, 0, (1,), 2, 2, 8, np.random.default_rng(0))
    c = net.Connection(net.Endpoint("127.0.0.1", servers[1].port))
    q = plans[1].to_bytes()
    local = pq.answer(pq.QueryPlan.from_bytes(q), world.databases[1]).to_bytes()
    assert c.request(net.QUERY, q)[1] == local
    # Replay after an unrelated query: the server keeps no state.
    other, _ = pq.build_level_queries("sj1", 1, 1, (), 2, 2, 8, np.random.default_rng(9))
    c.request(net.QUERY, other[1].to_bytes())
    assert c.request(net.QUERY, q)[1] == local
    c.close()


def test_remote_retrieval_matches_in_process(world, servers):
    eps = [("127.0.0.1", s.port) for s in servers]
    for z in range(2):
        for metric in (1, 2):
            local = pr.retrieve(world.client_view(), z, metric,
                                pr.InProcessTransport(world.databases, 2))
            remote = net.remote_retrieve(eps, world.client_view(), z, metric)
            assert remote.digest == local.digest
            assert remote.report.to_dict(wire=False) == local.report.to_dict(wire=False)
            assert np.array_equal(remote.x_hat, local.x_hat)
            assert remote.report.wire_bytes > 0


def test_answer_byte_audit(world, servers):
    eps = [net.Endpoint("127.0.0.1", s.port) for s in servers]
    with net.RemoteTransport(eps) as t:
        r = pr.retrieve(world.client_view(), 0, 1, t)
        n_answers = 2 * r.report.levels_executed
        gross_bytes = sum(lv.gross_bits for lv in r.report.levels) // 8
        assert t.answer_bytes == gross_bytes + n_answers * (16 + 32)
        received = sum(c.received for c in t.conns)
        assert received == t.answer_bytes + n_answers * net.FRAME_OVERHEAD + 2 * (net.FRAME_OVERHEAD + 2)


def test_server_down_aborts(world, servers):
    dead = socket.socket()
    dead.bind(("127.0.0.1", 0))
    port = dead.getsockname()[1]
    dead.close()
    with pytest.raises(TransportError):
        net.remote_retrieve([("127.0.0.1", servers[0].port), ("127.0.0.1", port)],
                            world.client_view(), 0, 1)
    with pytest.raises(ParameterError):
        net.remote_retrieve([("127.0.0.1", servers[0].port)], world.client_view(), 0, 1)


def test_server_dies_mid_session(world):
    srv = [net.start_background(world.databases, s) for s in range(2)]
    t = net.RemoteTransport([net.Endpoint("127.0.0.1", s.port) for s in srv])
    try:
        for s in srv:
            s.shutdown()
            s.server_close()
        for c in t.conns:
            c.sock.shutdown(socket.SHUT_RDWR)
        with pytest.raises(TransportError):
            pr.retrieve(world.client_view(), 0, 1, t)
    finally:
        t.close()


def test_database_file_round_trip(world):
    blob = net.dump_databases(world.databases)
    assert blob[:8] == b"PIRNSI01"
    back = net.load_databases(blob)
    for a, b in zip(world.databases, back):
        assert (a.level, a.b, a.bits) == (b.level, b.b, b.bits)
        assert np.array_equal(a.records, b.records)
    with pytest.raises(ParameterError):
        net.load_databases(b"NOTADB00" + blob[8:])
    with pytest.raises(ParameterError):
        net.load_databases(blob + b"\0")


def test_setup_frame_provisions(world):
    srv = net.start_background(None, 1)
    try:
        with net.RemoteTransport([net.Endpoint("127.0.0.1", srv.port)]) as t:
            t.provision(world.databases)
        c = net.Connection(net.Endpoint("127.0.0.1", srv.port))
        from pirnsi import pirquery as pq
        plans, _ = pq.build_level_queries("sj1", 1, 0, (), 2, 2, 8, np.random.default_rng(0))
        got = c.request(net.QUERY, plans[1].to_bytes())[1]
        assert got == pq.answer(plans[1], world.databases[0]).to_bytes()
        c.close()
    finally:
        srv.shutdown()
        srv.server_close()
