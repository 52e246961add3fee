"""Measurements derived from datagram traces."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable

from ..netlink.link import UP, TraceEvent
from ..netlink.transport import LABEL_CLIENT_HELLO, LABEL_CLOSE

DATA_LABELS = frozenset({"h3:DATA", "mqtt:PUBLISH"})
APP_PREFIXES = ("h3:", "mqtt:")
DEFAULT_BIN = 0.2
ALL_CONNECTIONS = "*"


class NoDataFrame(LookupError):
    """The connection never sent application data."""


def _first_hello(events: list[TraceEvent]) -> float:
    for event in events:
        if event.direction == UP and LABEL_CLIENT_HELLO in event.labels:
            return event.timestamp
    raise NoDataFrame("no Client Hello in trace")


def first_data_at(events: Iterable[TraceEvent]) -> float:
    """Egress time of the first uplink datagram carrying application payload."""
    for event in sorted(events, key=lambda e: e.timestamp):
        if event.direction == UP and DATA_LABELS.intersection(event.labels):
            return event.timestamp
    raise NoDataFrame("no application data frame in trace")


def time_to_first_data(events: Iterable[TraceEvent]) -> float:
    """First data datagram minus first Client Hello, both at publisher egress.

    ``events`` must come from a single publisher connection.
    """
    ordered = sorted(events, key=lambda e: e.timestamp)
    return first_data_at(ordered) - _first_hello(ordered)


def completion_time(events: Iterable[TraceEvent]) -> float:
    """Publisher's CONNECTION_CLOSE egress minus its first Client Hello."""
    ordered = sorted(events, key=lambda e: e.timestamp)
    hello = _first_hello(ordered)
    for event in ordered:
        if event.direction == UP and LABEL_CLOSE in event.labels:
            return event.timestamp - hello
    raise NoDataFrame("connection never closed")


def setup_packets_before_data(events: Iterable[TraceEvent]) -> list[TraceEvent]:
    """Datagrams in either direction that carry application-layer bytes but no
    payload data and left their sender before the first data datagram.

    For HTTP/3 this is empty: the request goes out with the first 1-RTT
    packet.  MQTT shows CONNECT and CONNACK.
    """
    ordered = sorted(events, key=lambda e: e.timestamp)
    cutoff = first_data_at(ordered)
    return [
        e
        for e in ordered
        if e.timestamp < cutoff
        and any(label.startswith(APP_PREFIXES) for label in e.labels)
        and not DATA_LABELS.intersection(e.labels)
    ]


def bin_throughput(
    events: Iterable[TraceEvent],
    bin_width: float = DEFAULT_BIN,
    *,
    direction: str | None = None,
    aggregate: bool = False,
) -> dict[str, list[tuple[float, int]]]:
    """Delivered bytes per connection in contiguous ``bin_width`` bins by arrival time.

    Each series runs from the connection's first to its last delivery;
    empty bins in between are kept as zeros.  With ``aggregate`` an extra
    series under ``"*"`` covers every connection together.
    """
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    per_flow: dict[str, list[tuple[float, int]]] = defaultdict(list)
    for event in events:
        if event.arrival is None or (direction is not None and event.direction != direction):
            continue
        per_flow[event.flow].append((event.arrival, event.size_bytes))
        if aggregate:
            per_flow[ALL_CONNECTIONS].append((event.arrival, event.size_bytes))
    return {flow: _bins(points, bin_width) for flow, points in sorted(per_flow.items())}


def _bins(points: list[tuple[float, int]], width: float) -> list[tuple[float, int]]:
    start = min(t for t, _ in points)
    end = max(t for t, _ in points)
    count = math.floor((end - start) / width) + 1
    totals = [0] * count
    for t, size in points:
        totals[min(count - 1, math.floor((t - start) / width))] += size
    return [(start + i * width, total) for i, total in enumerate(totals)]


def peak_throughput(series: list[tuple[float, int]], bin_width: float = DEFAULT_BIN) -> float:
    """Largest bin expressed in bits per second."""
    return max((b for _, b in series), default=0) * 8 / bin_width
