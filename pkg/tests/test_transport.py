from __future__ import annotations

import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h3pubsub.netlink.link import Network
from h3pubsub.netlink.profile import NetworkProfile
from h3pubsub.netlink.transport import (
    F_STOP_SENDING,
    LABEL_CLIENT_HELLO,
    LABEL_CLOSE,
    LABEL_SERVER_FLIGHT,
    AckFrame,
    ControlFrame,
    CryptoFrame,
    MalformedDatagram,
    ModeledServer,
    StreamChunk,
    TransportError,
    open_client,
    parse_frames,
)


class Recorder:
    """Server or client app that remembers everything the transport tells it."""

    def __init__(self, conn, echo=False):
        self.conn = conn
        self.echo = echo
        self.data: dict[int, bytearray] = {}
        self.fins: set[int] = set()
        self.resets: list[int] = []
        self.terminated: list = []
        self.ready = False

    def handshake_completed(self):
        self.ready = True

    def stream_data_received(self, sid, data, fin):
        self.data.setdefault(sid, bytearray()).extend(data)
        if fin:
            self.fins.add(sid)
        if self.echo and (data or fin):
            self.conn.send_stream_data(sid, data, fin)

    def stream_reset(self, sid):
        self.resets.append(sid)

    def connection_terminated(self, error):
        self.terminated.append(error)


class Pair:
    def __init__(self, profile, echo=True):
        self.net = Network(profile)
        self.loop = self.net.loop
        self.server_apps: list[Recorder] = []
        self.server = ModeledServer(self.net.broker, {"t": self._make})
        self.client = open_client(self.net.add_client("c"), "t")
        self.app = Recorder(self.client)
        self.client.app = self.app
        self.echo = echo

    def _make(self, conn):
        app = Recorder(conn, self.echo)
        self.server_apps.append(app)
        return app

    def run(self, coro, limit=600):
        return self.loop.run_until_complete(asyncio.wait_for(coro, limit))

    def close(self):
        self.net.close()
        self.loop.close()


@pytest.fixture
def pair():
    p = Pair(NetworkProfile(uplink_rate=1e6, downlink_rate=1e6, rtt=0.2, seed=1))
    yield p
    p.close()


def test_handshake_is_one_round_trip(pair):
    pair.client.connect()
    pair.run(pair.client.handshake_complete)
    elapsed = pair.client.handshake_completed_at - pair.client.first_hello_at
    assert 0.2 <= elapsed < 0.2 + 0.05
    labels = [e.labels for e in pair.net.trace]
    assert labels[0] == (LABEL_CLIENT_HELLO,)
    assert all(l == (LABEL_SERVER_FLIGHT,) for l in labels[1:4])
    assert pair.app.ready


def test_client_hello_padded_to_1200(pair):
    pair.client.connect()
    pair.run(pair.client.handshake_complete)
    assert pair.net.trace.events[0].size_bytes == 1200


def test_stream_echo_and_fin(pair):
    pair.client.connect()
    sid = pair.client.get_next_stream_id()
    pair.client.send_stream_data(sid, b"hello " * 1000, end_stream=True)
    pair.run(pair.client.handshake_complete)
    pair.run(pair.client.wait_acked())
    pair.run(asyncio.sleep(1))
    assert bytes(pair.app.data[sid]) == b"hello " * 1000
    assert sid in pair.app.fins
    with pytest.raises(TransportError):
        pair.client.send_stream_data(sid, b"more")


def test_stream_ids():
    p = Pair(NetworkProfile(rtt=0.1))
    c = p.client
    assert [c.get_next_stream_id(), c.get_next_stream_id(), c.get_next_stream_id(True)] == [0, 4, 2]
    p.close()


def test_close_reaches_peer(pair):
    pair.client.connect()
    pair.run(pair.client.handshake_complete)
    pair.client.close()
    assert pair.client.state == "closed"
    pair.run(asyncio.sleep(1))
    assert pair.server_apps[0].terminated == [None]
    assert [e.direction for e in pair.net.trace if LABEL_CLOSE in e.labels] == ["up"]


def test_stop_sending_triggers_reset(pair):
    pair.echo = False
    pair.client.connect()
    pair.run(pair.client.handshake_complete)
    sid = pair.client.get_next_stream_id()
    pair.client.send_stream_data(sid, b"x")
    pair.run(asyncio.sleep(1))
    server_conn = pair.server_apps[0].conn
    server_conn.send_stream_data(sid, b"y" * 100)
    pair.client.stop_sending(sid)
    pair.run(asyncio.sleep(1))
    assert sid in pair.server_apps[0].resets


def test_unknown_alpn_is_ignored():
    net = Network(NetworkProfile(rtt=0.1))
    ModeledServer(net.broker, {"h3": lambda conn: Recorder(conn)})
    client = open_client(net.add_client("c"), "nope")
    client.connect()
    net.loop.run_until_complete(asyncio.sleep(3))
    assert client.state == "handshake"
    assert client.stats.client_hello_sent > 1
    net.close()
    net.loop.close()


def test_handshake_gives_up_when_link_is_dead():
    net = Network(NetworkProfile(rtt=0.1, loss_probability=1.0))
    ModeledServer(net.broker, {"t": lambda conn: Recorder(conn)})
    client = open_client(net.add_client("c"), "t")
    client.connect()
    with pytest.raises(TransportError):
        net.loop.run_until_complete(client.handshake_complete)
    net.close()
    net.loop.close()


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.sampled_from([0.05, 0.15, 0.3]), st.integers(1, 20_000))
def test_reliable_under_loss(seed, loss, size):
    p = Pair(NetworkProfile(uplink_rate=1e6, downlink_rate=1e6, rtt=0.1, loss_probability=loss, seed=seed))
    try:
        payload = bytes(i % 251 for i in range(size))
        p.client.connect()
        sid = p.client.get_next_stream_id()
        p.client.send_stream_data(sid, payload, end_stream=True)
        p.run(p.client.handshake_complete)

        async def echoed():
            while sid not in p.app.fins:
                await asyncio.sleep(0.05)

        p.run(echoed())
        assert bytes(p.app.data[sid]) == payload
    finally:
        p.close()


def test_frames_round_trip():
    frames = [
        StreamChunk(4, 10, b"abc", True),
        ControlFrame(F_STOP_SENDING, 8, 3),
        CryptoFrame(0, b"CHLO"),
        AckFrame([(9, 7), (3, 0)]),
    ]
    parsed = parse_frames(b"".join(f.encode() for f in frames))
    assert [type(f) for f in parsed] == [type(f) for f in frames]
    assert (parsed[0].stream_id, parsed[0].offset, parsed[0].data, parsed[0].fin) == (4, 10, b"abc", True)
    assert parsed[3].ranges == [(9, 7), (3, 0)]
    with pytest.raises(MalformedDatagram):
        parse_frames(b"\x3f")
