"""Experiment definitions and the orchestrator that runs them.

Every run builds a fresh broker and star network, pre-creates the topic,
brings one subscriber up, then starts the publishers on their schedule.
Each publisher opens its own connection, publishes one message and closes.
HTTP/3 publishers POST straight away; MQTT publishers authenticate with
username/password first, as the baseline is configured to.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from ..core import Broker
from ..h3.client import H3Client
from ..h3.modeled import ALPN_H3, ModeledH3BrokerApp, ModeledH3Channel
from ..mqtt.client import MqttClient
from ..mqtt.modeled import ModeledMqttBrokerApp, ModeledMqttChannel
from ..mqtt.packets import SUCCESS
from ..mqtt.session import ALPN_MQTT
from ..netlink.link import Network, capture_stats
from ..netlink.profile import NetworkProfile, normalize_mode
from ..netlink.transport import ModeledServer, TransportConfig, open_client
from .metrics import ALL_CONNECTIONS, DEFAULT_BIN, NoDataFrame, bin_throughput, completion_time, setup_packets_before_data, time_to_first_data
from .report import AGGREGATE_NAME, MetricsReport, ResourcePoint, RunRecord, ThroughputPoint
from .resources import ResourceSampler, Unsupported

logger = logging.getLogger(__name__)

SCENARIOS = ("first_data", "interleaved", "overhead_sweep", "resource")
PROTOCOLS = ("h3", "mqtt")
KB = 1024
SWEEP_SIZES = tuple(k * KB for k in range(1, 11))
TOPIC = "bench"
SUBSCRIBER = "sub"
MQTT_USERNAME = "publisher"
MQTT_PASSWORD = b"nb-iot"
DEFAULT_REPETITIONS = 1
LOSSY_REPETITIONS = 10

_DEFAULTS: dict[str, dict[str, Any]] = {
    "first_data": {"message_sizes": SWEEP_SIZES, "publisher_count": 1, "stagger": 0.0},
    "overhead_sweep": {"message_sizes": SWEEP_SIZES, "publisher_count": 1, "stagger": 0.0},
    "interleaved": {"message_sizes": (KB,), "publisher_count": 5, "stagger": 1.0},
    "resource": {"message_sizes": (KB,), "publisher_count": 1, "stagger": 0.0},
}


class ConfigError(ValueError):
    pass


class ScenarioFailure(RuntimeError):
    pass


@dataclass
class ScenarioConfig:
    """What to run.  ``None`` fields take the scenario's defaults.

    Repetitions default to 10 on lossy profiles and 1 otherwise; repetition
    ``i`` uses seed ``profile.seed + i`` so reruns are identical.
    """

    scenario: str
    protocol: str = "both"
    profile: NetworkProfile = field(default_factory=NetworkProfile.nb_iot)
    message_sizes: tuple[int, ...] | None = None
    publisher_count: int | None = None
    stagger: float | None = None
    repetitions: int | None = None
    output: str | None = None
    mode: str | None = None
    transport: TransportConfig = field(default_factory=TransportConfig)
    mqtt_auth: bool = True
    run_timeout: float = 900.0
    bin_width: float = DEFAULT_BIN

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if self.protocol not in (*PROTOCOLS, "both"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        defaults = _DEFAULTS[self.scenario]
        if self.message_sizes is None:
            self.message_sizes = defaults["message_sizes"]
        self.message_sizes = tuple(int(s) for s in self.message_sizes)
        if not self.message_sizes or any(s < 0 for s in self.message_sizes):
            raise ConfigError("message sizes must be non-negative and non-empty")
        if self.publisher_count is None:
            self.publisher_count = defaults["publisher_count"]
        if self.publisher_count < 1:
            raise ConfigError("need at least one publisher")
        if self.stagger is None:
            self.stagger = defaults["stagger"]
        if self.stagger < 0:
            raise ConfigError("stagger must be non-negative")
        if self.repetitions is None:
            self.repetitions = LOSSY_REPETITIONS if self.profile.loss_probability > 0 else DEFAULT_REPETITIONS
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.mode is None:
            self.mode = "realtime" if self.scenario == "resource" else "virtual_time"
        try:
            self.mode = normalize_mode(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.scenario == "resource" and self.mode != "realtime":
            raise ConfigError("resource sampling needs realtime mode")

    @property
    def protocols(self) -> tuple[str, ...]:
        return PROTOCOLS if self.protocol == "both" else (self.protocol,)

    def to_mapping(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "protocol": self.protocol,
            "profile": self.profile.to_mapping(),
            "message_sizes": list(self.message_sizes),
            "publisher_count": self.publisher_count,
            "stagger": self.stagger,
            "repetitions": self.repetitions,
            "mode": self.mode,
            "mqtt_auth": self.mqtt_auth,
        }


@dataclass(frozen=True)
class PublisherPlan:
    flow: str
    start: float
    topic: str
    payload: bytes


@dataclass(frozen=True)
class RunPlan:
    """Everything a single run depends on apart from the protocol."""

    rep: int
    profile: NetworkProfile
    msg_size: int
    topics: tuple[str, ...]
    publishers: tuple[PublisherPlan, ...]

    def fingerprint(self) -> str:
        blob = {
            "profile": self.profile.fingerprint_fields(),
            "topics": list(self.topics),
            "publishers": [
                (p.flow, p.start, p.topic, hashlib.sha256(p.payload).hexdigest()) for p in self.publishers
            ],
        }
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


def payload_for(seed: int, flow: str, size: int) -> bytes:
    return random.Random(f"{seed}/payload/{flow}/{size}").randbytes(size)


def build_plans(config: ScenarioConfig) -> list[RunPlan]:
    plans = []
    for rep in range(config.repetitions):
        seed = config.profile.seed + rep
        profile = config.profile.with_seed(seed)
        sizes = config.message_sizes
        for size in sizes:
            publishers = tuple(
                PublisherPlan(f"pub{i + 1}", i * config.stagger, TOPIC, payload_for(seed, f"pub{i + 1}", size))
                for i in range(config.publisher_count)
            )
            plans.append(RunPlan(rep, profile, size, (TOPIC,), publishers))
    return plans


# -- protocol stacks ------------------------------------------------------------------


class _Stack:
    """Creates broker servers and clients on either the modeled or the real QUIC stack."""

    def __init__(self, net: Network, broker: Broker, config: ScenarioConfig) -> None:
        self.net = net
        self.loop = net.loop
        self.realtime = net.mode == "realtime"
        self.transport = config.transport
        credentials = {MQTT_USERNAME: MQTT_PASSWORD} if config.mqtt_auth else None
        if self.realtime:
            from ..quicstack import QuicBrokerServer

            QuicBrokerServer(net.broker, broker, credentials=credentials)
        else:
            ModeledServer(
                net.broker,
                {
                    ALPN_H3: lambda conn: ModeledH3BrokerApp(conn, broker),
                    ALPN_MQTT: lambda conn: ModeledMqttBrokerApp(conn, broker, credentials),
                },
                self.transport,
            )

    def h3(self, flow: str) -> H3Client:
        endpoint = self.net.add_client(flow)
        if self.realtime:
            from ..quicstack import QuicH3Channel, open_quic_client

            driver = open_quic_client(endpoint, ALPN_H3)
            channel = QuicH3Channel(driver)
        else:
            driver = open_client(endpoint, ALPN_H3, self.transport)
            channel = ModeledH3Channel(driver)
        driver.connect()
        return H3Client(channel, self.loop)

    def mqtt(self, flow: str) -> MqttClient:
        endpoint = self.net.add_client(flow)
        if self.realtime:
            from ..quicstack import QuicMqttChannel, open_quic_client

            driver = open_quic_client(endpoint, ALPN_MQTT)
            channel = QuicMqttChannel(driver)
        else:
            driver = open_client(endpoint, ALPN_MQTT, self.transport)
            channel = ModeledMqttChannel(driver)
        driver.connect()
        return MqttClient(channel, flow, self.loop)


async def _mqtt_connect(client: MqttClient, auth: bool) -> None:
    code = await (client.connect(MQTT_USERNAME, MQTT_PASSWORD) if auth else client.connect())
    if code != SUCCESS:
        raise ScenarioFailure(f"CONNACK reason {code:#04x}")


async def _publish(stack: _Stack, protocol: str, plan: PublisherPlan, auth: bool) -> None:
    if protocol == "h3":
        client = stack.h3(plan.flow)
        outcome = await client.publish(plan.topic, plan.payload)
        client.close()
        if outcome.code != 200:
            raise ScenarioFailure(f"POST returned {outcome.code}")
    else:
        client = stack.mqtt(plan.flow)
        await _mqtt_connect(client, auth)
        await client.publish(plan.topic, plan.payload)
        await client.disconnect()


class _Collector:
    def __init__(self, loop: asyncio.AbstractEventLoop) -> None:
        self.payloads: list[bytes] = []
        self._changed = asyncio.Event()

    def __call__(self, payload: bytes) -> None:
        self.payloads.append(payload)
        self._changed.set()

    async def wait_for(self, count: int) -> None:
        while len(self.payloads) < count:
            self._changed.clear()
            await self._changed.wait()


async def _subscribe(stack: _Stack, protocol: str, topic: str, auth: bool, collector: _Collector) -> Callable[[], None]:
    if protocol == "h3":
        client = stack.h3(SUBSCRIBER)
        subscription = await client.subscribe(topic, collector)

        def close() -> None:
            subscription.cancel()
            client.close()

        return close
    client = stack.mqtt(SUBSCRIBER)
    await _mqtt_connect(client, auth)
    code = await client.subscribe(topic, collector)
    if code != SUCCESS:
        raise ScenarioFailure(f"SUBACK reason {code:#04x}")
    return client.channel.close


@dataclass
class _Outcome:
    errors: dict[str, str]
    delivered: dict[str, bool]
    started_at: float
    events: list = field(default_factory=list)


async def _run_plan(stack: _Stack, protocol: str, plan: RunPlan, config: ScenarioConfig) -> _Outcome:
    loop = stack.loop
    collector = _Collector(loop)
    close_subscriber = await _subscribe(stack, protocol, plan.topics[0], config.mqtt_auth, collector)
    started = loop.time()

    async def scheduled(p: PublisherPlan) -> None:
        await asyncio.sleep(max(0.0, started + p.start - loop.time()))
        await _publish(stack, protocol, p, config.mqtt_auth)

    results = await asyncio.gather(*(scheduled(p) for p in plan.publishers), return_exceptions=True)
    errors = {
        p.flow: f"{type(r).__name__}: {r}" for p, r in zip(plan.publishers, results) if isinstance(r, BaseException)
    }
    accepted = [p for p in plan.publishers if p.flow not in errors]
    await collector.wait_for(len(accepted))
    close_subscriber()
    received = list(collector.payloads)
    delivered = {}
    for p in plan.publishers:
        if p.payload in received:
            received.remove(p.payload)
            delivered[p.flow] = True
        else:
            delivered[p.flow] = False
    return _Outcome(errors, delivered, started)


def _execute(plan: RunPlan, protocol: str, config: ScenarioConfig) -> tuple[_Outcome, Network]:
    net = Network(plan.profile, config.mode)
    broker = Broker(clock=net.loop.time)
    broker.create_topic(plan.topics[0])
    stack = _Stack(net, broker, config)
    try:
        outcome = net.loop.run_until_complete(asyncio.wait_for(_run_plan(stack, protocol, plan, config), config.run_timeout))
    except Exception as exc:  # a broken run is recorded, not raised
        logger.warning("%s %s rep %d size %d failed: %s", config.scenario, protocol, plan.rep, plan.msg_size, exc)
        reason = f"{type(exc).__name__}: {exc}" if str(exc) else type(exc).__name__
        outcome = _Outcome({p.flow: reason for p in plan.publishers}, {p.flow: False for p in plan.publishers}, 0.0)
    finally:
        _shutdown(net)
    return outcome, net


def _shutdown(net: Network) -> None:
    loop = net.loop
    pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for task in pending:
        task.cancel()
    if pending:
        try:
            loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        except Exception:  # pragma: no cover - best-effort cleanup
            pass
    net.close()
    loop.close()


def _record(plan: RunPlan, protocol: str, publisher: PublisherPlan, net: Network, outcome: _Outcome, scenario: str) -> RunRecord:
    events = net.trace.for_flow(publisher.flow)
    stats = capture_stats(events)
    error = outcome.errors.get(publisher.flow)
    first = complete = setup = None
    try:
        first = round(time_to_first_data(events) * 1000, 3)
        setup = len(setup_packets_before_data(events))
    except NoDataFrame as exc:
        error = error or str(exc)
    try:
        complete = round(completion_time(events) * 1000, 3)
    except NoDataFrame as exc:
        error = error or str(exc)
    delivered = outcome.delivered.get(publisher.flow, False)
    if error is None and not delivered:
        error = "subscriber did not receive the payload"
    return RunRecord(
        scenario=scenario,
        protocol=protocol,
        msg_size_bytes=plan.msg_size,
        rep=plan.rep,
        t_first_data_ms=first,
        t_complete_ms=complete,
        up_bytes=stats.up_bytes,
        down_bytes=stats.down_bytes,
        up_pkts=stats.up_packets,
        down_pkts=stats.down_packets,
        dropped=stats.dropped,
        connection=publisher.flow,
        seed=plan.profile.seed,
        setup_pkts=setup,
        delivered=delivered,
        error=error,
    )


def run_scenario(config: ScenarioConfig) -> MetricsReport:
    """Run every (repetition, size, protocol) combination and collect the results.

    Each protocol's fingerprint digests the plans it actually ran, so paired
    runs can be checked for identical profiles, seeds, topics and payloads.
    """
    report = MetricsReport(config.scenario, config.profile.rtt, config.to_mapping())
    digests = {protocol: hashlib.sha256() for protocol in config.protocols}
    for plan in build_plans(config):
        for protocol in config.protocols:
            digests[protocol].update(plan.fingerprint().encode())
            sampler = None
            if config.scenario == "resource":
                try:
                    sampler = ResourceSampler(os.getpid()).start()
                except Unsupported as exc:
                    logger.warning("resource sampling unavailable: %s", exc)
            try:
                outcome, net = _execute(plan, protocol, config)
            finally:
                samples = sampler.stop() if sampler is not None else []
            for sample in samples:
                report.resources.append(ResourcePoint(protocol, plan.rep, sample.ts, sample.cpu_fraction))
            for publisher in plan.publishers:
                report.records.append(_record(plan, protocol, publisher, net, outcome, config.scenario))
            report.traces[(protocol, plan.rep, plan.msg_size)] = list(net.trace.events)
            if config.scenario == "interleaved":
                flows = {p.flow for p in plan.publishers}
                publisher_events = [e for e in net.trace.events if e.flow in flows]
                for conn, bins in bin_throughput(publisher_events, config.bin_width, aggregate=True).items():
                    name = AGGREGATE_NAME if conn == ALL_CONNECTIONS else conn
                    for start, size in bins:
                        report.throughput.append(
                            ThroughputPoint(protocol, plan.rep, name, round(start * 1000, 3), size)
                        )
    report.fingerprints = {protocol: digest.hexdigest() for protocol, digest in digests.items()}
    return report.normalize()
