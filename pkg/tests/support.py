"""Shared setup for end-to-end tests on the virtual-time star network."""

from __future__ import annotations

from dataclasses import dataclass

from h3pubsub.core import Broker
from h3pubsub.h3.client import H3Client
from h3pubsub.h3.modeled import ALPN_H3, ModeledH3BrokerApp, ModeledH3Channel
from h3pubsub.mqtt.client import MqttClient
from h3pubsub.mqtt.modeled import ModeledMqttBrokerApp, ModeledMqttChannel
from h3pubsub.mqtt.session import ALPN_MQTT
from h3pubsub.netlink.link import Network
from h3pubsub.netlink.profile import NetworkProfile
from h3pubsub.netlink.transport import ModeledServer, TransportConfig, open_client

FAST = NetworkProfile(downlink_rate=10e6, uplink_rate=10e6, rtt=0.05, loss_probability=0.0, seed=1)
CREDENTIALS = {"alice": b"wonderland"}


@dataclass
class Bed:
    net: Network
    broker: Broker
    server: ModeledServer

    @property
    def loop(self):
        return self.net.loop

    def h3(self, flow: str) -> H3Client:
        conn = open_client(self.net.add_client(flow), ALPN_H3, self.server.config)
        client = H3Client(ModeledH3Channel(conn), self.loop)
        conn.connect()
        return client

    def mqtt(self, flow: str) -> MqttClient:
        conn = open_client(self.net.add_client(flow), ALPN_MQTT, self.server.config)
        client = MqttClient(ModeledMqttChannel(conn), flow, self.loop)
        conn.connect()
        return client

    def run(self, coro):
        return self.loop.run_until_complete(coro)

    def close(self) -> None:
        self.net.close()
        self.loop.close()


def make_bed(
    profile: NetworkProfile = FAST,
    credentials=CREDENTIALS,
    config: TransportConfig | None = None,
    broker: Broker | None = None,
) -> Bed:
    net = Network(profile, "virtual_time")
    broker = broker or Broker(clock=net.loop.time)
    server = ModeledServer(
        net.broker,
        {
            ALPN_H3: lambda conn: ModeledH3BrokerApp(conn, broker),
            ALPN_MQTT: lambda conn: ModeledMqttBrokerApp(conn, broker, credentials),
        },
        config,
    )
    return Bed(net, broker, server)


@dataclass
class Blast:
    events: list
    received: list[int]
    sent: int
    by_link: dict[tuple[str, str], list[int]]
    csv: str


def blast(
    profile: NetworkProfile,
    count: int,
    seed: int = 0,
    *,
    flows: int = 1,
    mean_gap: float = 0.02,
    downlink_share: float = 0.0,
) -> Blast:
    """Offer ``count`` random-size datagrams, each tagged with its index.

    A ``downlink_share`` fraction goes broker to client; the rest client to
    broker.  ``by_link`` lists arrival order per (direction, flow).
    """
    import asyncio
    import random

    rng = random.Random(seed)
    net = Network(profile, "virtual_time")
    clients = [net.add_client(f"c{i}") for i in range(flows)]
    received: list[int] = []
    by_link: dict[tuple[str, str], list[int]] = {}

    def sink(direction, flow):
        def on_datagram(data, src):
            index = int.from_bytes(data[:4], "big")
            received.append(index)
            by_link.setdefault((direction, flow if direction == "down" else src), []).append(index)

        return on_datagram

    net.broker.on_datagram = sink("up", None)
    for c in clients:
        c.on_datagram = sink("down", c.name)
    t = 0.0
    for i in range(count):
        t += rng.expovariate(1 / mean_gap)
        size = rng.randint(4, 1500)
        payload = i.to_bytes(4, "big") + bytes(size - 4)
        client = clients[i % flows]
        if rng.random() < downlink_share:
            send = lambda p=payload, to=client.name: net.broker.send_datagram(p, to=to)
        else:
            send = lambda p=payload, c=client: c.send_datagram(p)
        net.loop.call_at(t, send)
    try:
        net.loop.run_until_complete(asyncio.sleep(t + 3600))
        return Blast(list(net.trace), received, count, by_link, net.trace.to_csv())
    finally:
        net.close()
        net.loop.close()
