"""Shaped links, datagram capture and the star topology used by the benchmarks.

Every client (publisher or subscriber) owns an uplink shaper on its egress;
the broker owns a single downlink shaper shared by all of its traffic.
Shaping happens on egress only: a datagram is delayed behind earlier
datagrams by its serialization time at the configured rate, then by half
the RTT, unless a seeded uniform draw drops it first.
"""

from __future__ import annotations

import asyncio
import bisect
import csv
import itertools
import io
import math
import random
import socket
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, TextIO

from .clock import VirtualClockLoop
from .profile import NetworkProfile, normalize_mode

MTU = 1500
UP = "up"
DOWN = "down"
DELIVERED = "delivered"
DROPPED = "dropped"
CSV_COLUMNS = ("ts_us", "direction", "size_bytes", "disposition", "flow")
BROKER = "broker"

# delivery callbacks may fire a hair before the float arrival time
_TIME_SLACK = 1e-9


class OversizedDatagram(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class TraceEvent:
    """One datagram handed to a link.

    ``timestamp`` is the egress time (when the sender handed it over);
    ``arrival`` is when the far end receives it, or None if dropped.
    ``labels`` name the protocol content (e.g. ``quic:client_hello``,
    ``h3:DATA``) where the sender knows it.
    """

    timestamp: float
    direction: str
    size_bytes: int
    disposition: str
    flow: str
    arrival: float | None = None
    labels: tuple[str, ...] = ()

    @property
    def delivered(self) -> bool:
        return self.disposition == DELIVERED


@dataclass
class CaptureStats:
    up_bytes: int = 0
    down_bytes: int = 0
    up_packets: int = 0
    down_packets: int = 0
    dropped: int = 0

    def add(self, event: TraceEvent) -> None:
        if event.direction == UP:
            self.up_bytes += event.size_bytes
            self.up_packets += 1
        else:
            self.down_bytes += event.size_bytes
            self.down_packets += 1
        if not event.delivered:
            self.dropped += 1

    @property
    def total_bytes(self) -> int:
        return self.up_bytes + self.down_bytes

    @property
    def total_packets(self) -> int:
        return self.up_packets + self.down_packets


def capture_stats(events: Iterable[TraceEvent]) -> CaptureStats:
    """Byte and packet totals per direction over everything that was sent.

    Dropped datagrams still count as sent; ``dropped`` says how many of
    them never arrived.
    """
    stats = CaptureStats()
    for event in events:
        stats.add(event)
    return stats


class Trace:
    """Append-only capture of every datagram offered to a link."""

    def __init__(self) -> None:
        self.events: list[TraceEvent] = []
        self.stats = CaptureStats()

    def record(self, event: TraceEvent) -> None:
        self.events.append(event)
        self.stats.add(event)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def flows(self) -> list[str]:
        return list(dict.fromkeys(event.flow for event in self.events))

    def for_flow(self, flow: str) -> list[TraceEvent]:
        return [event for event in self.events if event.flow == flow]

    def write_csv(self, out: TextIO) -> None:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for e in self.events:
            writer.writerow((round(e.timestamp * 1e6), e.direction, e.size_bytes, e.disposition, e.flow))

    def to_csv(self) -> str:
        out = io.StringIO()
        self.write_csv(out)
        return out.getvalue()

    @classmethod
    def read_csv(cls, source: TextIO) -> Trace:
        trace = cls()
        for row in csv.DictReader(source):
            trace.record(
                TraceEvent(
                    timestamp=int(row["ts_us"]) / 1e6,
                    direction=row["direction"],
                    size_bytes=int(row["size_bytes"]),
                    disposition=row["disposition"],
                    flow=row["flow"],
                )
            )
        return trace


class Shaper:
    """Egress conditioning for one direction: FIFO rate queue, fixed delay, uniform loss."""

    def __init__(
        self,
        rate: float,
        delay: float,
        loss_probability: float,
        rng: random.Random,
        direction: str,
        trace: Trace,
        *,
        mtu: int = MTU,
        loop: asyncio.AbstractEventLoop | None = None,
    ) -> None:
        self.rate = rate
        self.delay = delay
        self.loss_probability = loss_probability
        self.rng = rng
        self.direction = direction
        self.trace = trace
        self.mtu = mtu
        self.loop = loop
        self.link_free = -math.inf
        self._pending: deque[tuple[float, Callable[[], None]]] = deque()
        self._timer: asyncio.TimerHandle | None = None

    def serialization_time(self, size: int) -> float:
        return size * 8 / self.rate

    def admit(
        self, payload: bytes, now: float, flow: str, labels: tuple[str, ...] = ()
    ) -> float | None:
        """Decide the fate of one datagram; returns its arrival time or None if dropped."""
        size = len(payload)
        if size > self.mtu:
            raise OversizedDatagram(f"{size}-byte datagram exceeds MTU {self.mtu}")
        if self.rng.random() < self.loss_probability:
            self.trace.record(TraceEvent(now, self.direction, size, DROPPED, flow, None, labels))
            return None
        self.link_free = max(now, self.link_free) + self.serialization_time(size)
        arrival = self.link_free + self.delay
        self.trace.record(TraceEvent(now, self.direction, size, DELIVERED, flow, arrival, labels))
        return arrival

    def schedule(self, arrival: float, deliver: Callable[[], None]) -> None:
        # one timer per direction keeps deliveries strictly FIFO even when
        # arrival times tie (the loop's timer heap is not stable)
        self._pending.append((arrival, deliver))
        if self._timer is None:
            self._arm()

    def _arm(self) -> None:
        self._timer = self.loop.call_at(self._pending[0][0], self._fire)

    def _fire(self) -> None:
        self._timer = None
        now = self.loop.time()
        while self._pending and self._pending[0][0] <= now + _TIME_SLACK:
            _, deliver = self._pending.popleft()
            deliver()
        if self._pending:
            self._arm()

    def cancel(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        self._pending.clear()


class LinkEndpoint:
    """One interface on the star: a client NIC (uplink egress) or the broker NIC (downlink egress)."""

    def __init__(self, network: Network, name: str, shaper: Shaper) -> None:
        self.network = network
        self.name = name
        self.shaper = shaper
        self.on_datagram: Callable[[bytes, str], None] | None = None
        self._sock: socket.socket | None = None

    @property
    def is_broker(self) -> bool:
        return self.name == BROKER

    @property
    def loop(self) -> asyncio.AbstractEventLoop:
        return self.network.loop

    def send_datagram(
        self,
        payload: bytes,
        now: float | None = None,
        *,
        to: str | None = None,
        labels: tuple[str, ...] = (),
    ) -> float | None:
        """Offer ``payload`` to this endpoint's egress shaper.

        Clients always send to the broker; the broker names the client flow
        in ``to``.  Returns the scheduled arrival time, or None when the
        datagram was dropped.
        """
        if self.is_broker:
            if to is None:
                raise ValueError("broker datagrams need a destination flow")
            flow, peer = to, self.network.clients[to]
        else:
            flow, peer = self.name, self.network.broker
        if now is None:
            now = self.loop.time()
        arrival = self.shaper.admit(bytes(payload), now, flow, labels)
        if arrival is not None and peer.on_datagram is not None and self.loop is not None:
            self.shaper.schedule(arrival, lambda: self.network._deliver(self, peer, payload))
        return arrival


class Network:
    """Star topology: one broker endpoint and any number of client endpoints.

    In ``virtual_time`` mode delivery is an in-process callback on a
    :class:`VirtualClockLoop`.  In ``realtime`` mode every delivered datagram
    really crosses a UDP loopback socket pair under the wall clock.
    """

    def __init__(
        self,
        profile: NetworkProfile,
        mode: str = "virtual_time",
        loop: asyncio.AbstractEventLoop | None = None,
        *,
        mtu: int = MTU,
    ) -> None:
        self.profile = profile
        self.mode = normalize_mode(mode)
        if loop is None:
            loop = VirtualClockLoop() if self.mode == "virtual_time" else asyncio.new_event_loop()
        self.loop = loop
        self.mtu = mtu
        self.trace = Trace()
        self.clients: dict[str, LinkEndpoint] = {}
        self.broker = LinkEndpoint(self, BROKER, self._shaper(profile.downlink_rate, DOWN, f"{profile.seed}/down"))
        self._by_addr: dict[tuple[str, int], LinkEndpoint] = {}
        if self.mode == "realtime":
            self._bind(self.broker)

    def _shaper(self, rate: float, direction: str, stream: str) -> Shaper:
        p = self.profile
        return Shaper(
            rate, p.one_way_delay, p.loss_probability, random.Random(stream),
            direction, self.trace, mtu=self.mtu, loop=self.loop,
        )

    def add_client(self, flow: str) -> LinkEndpoint:
        if flow in self.clients or flow == BROKER:
            raise ValueError(f"flow {flow!r} already attached")
        endpoint = LinkEndpoint(self, flow, self._shaper(self.profile.uplink_rate, UP, f"{self.profile.seed}/up/{flow}"))
        self.clients[flow] = endpoint
        if self.mode == "realtime":
            self._bind(endpoint)
        return endpoint

    # -- realtime plumbing ----------------------------------------------------

    def _bind(self, endpoint: LinkEndpoint) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(("127.0.0.1", 0))
        sock.setblocking(False)
        endpoint._sock = sock
        self._by_addr[sock.getsockname()] = endpoint
        self.loop.add_reader(sock.fileno(), self._readable, endpoint)

    def _readable(self, endpoint: LinkEndpoint) -> None:
        while True:
            try:
                data, addr = endpoint._sock.recvfrom(65535)
            except BlockingIOError:
                return
            sender = self._by_addr.get(addr)
            if sender is not None and endpoint.on_datagram is not None:
                endpoint.on_datagram(data, sender.name if endpoint.is_broker else BROKER)

    def _deliver(self, sender: LinkEndpoint, receiver: LinkEndpoint, payload: bytes) -> None:
        if sender._sock is not None:
            sender._sock.sendto(payload, receiver._sock.getsockname())
        elif receiver.on_datagram is not None:
            receiver.on_datagram(payload, sender.name if receiver.is_broker else BROKER)

    def close(self) -> None:
        for endpoint in (self.broker, *self.clients.values()):
            endpoint.shaper.cancel()
            if endpoint._sock is not None:
                self.loop.remove_reader(endpoint._sock.fileno())
                endpoint._sock.close()
                endpoint._sock = None


def make_link(
    profile: NetworkProfile,
    mode: str = "virtual_time",
    loop: asyncio.AbstractEventLoop | None = None,
    *,
    flow: str = "client",
) -> tuple[LinkEndpoint, LinkEndpoint, Trace]:
    """A two-node link: ``(client_endpoint, broker_endpoint, trace)``."""
    network = Network(profile, mode, loop)
    client = network.add_client(flow)
    return client, network.broker, network.trace


def max_windowed_goodput(
    events: Iterable[TraceEvent], direction: str, window: float, rate: float
) -> float:
    """Highest delivered bit rate over any ``window``-long span, in bits/s.

    Each delivered datagram's bits are spread over its receive interval
    ``[arrival - size*8/rate, arrival]``, i.e. the bits are counted as they
    come off the wire.  The cumulative-bits curve is piecewise linear, so
    the maximum is found by evaluating windows ending at every breakpoint.
    """
    starts, ends = [], []
    for e in events:
        if e.direction == direction and e.delivered:
            ends.append(e.arrival)
            starts.append(e.arrival - e.size_bytes * 8 / rate)
    if not starts:
        return 0.0
    starts.sort()
    ends.sort()
    start_prefix = list(itertools.accumulate(starts, initial=0.0))
    end_prefix = list(itertools.accumulate(ends, initial=0.0))

    def busy_until(t: float) -> float:
        # total wire time of all intervals clipped to (-inf, t]
        ns = bisect.bisect_left(starts, t)
        ne = bisect.bisect_left(ends, t)
        return (ns * t - start_prefix[ns]) - (ne * t - end_prefix[ne])

    candidates = set(ends) | set(starts)
    candidates |= {t + window for t in candidates}
    best = max(busy_until(t) - busy_until(t - window) for t in candidates)
    return best * rate / window
