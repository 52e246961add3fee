"""Real QUIC (aioquic) driven over shaped link endpoints.

aioquic is sans-IO: it hands us datagrams and a timer deadline and takes
``now`` as an argument.  :class:`QuicDriver` pumps one connection through a
:class:`LinkEndpoint`, so the same shaper, loss model and trace apply to
the real stack as to the modeled one.  The broker co-hosts HTTP/3 (ALPN
``h3``) and MQTT (ALPN ``mqtt``) on one endpoint.

Datagram labels are best effort here since payloads are encrypted: Initial
datagrams a client sends before hearing from the server are its Client
Hello, and application labels are attached to the first datagram able to
carry 1-RTT data after the application wrote the labelled bytes.
"""

from __future__ import annotations

import asyncio
import datetime
import ipaddress
import logging
from typing import Callable, Mapping

from aioquic.buffer import Buffer
from aioquic.h3.connection import H3Connection, Setting
from aioquic.h3.events import DataReceived, H3Event, HeadersReceived
from aioquic.quic.configuration import QuicConfiguration
from aioquic.quic.connection import QuicConnection
from aioquic.quic.events import (
    ConnectionTerminated,
    HandshakeCompleted,
    QuicEvent,
    StopSendingReceived,
    StreamDataReceived,
    StreamReset,
)
from aioquic.quic.packet import pull_quic_header
from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

from .core import Broker
from .h3.client import ResponseListener, StreamEndedAbnormally
from .h3.modeled import ALPN_H3, LABEL_DATA, LABEL_HEADERS
from .h3.routing import H3BrokerSession
from .h3.wire import header_value, request_headers
from .mqtt.session import ALPN_MQTT, MqttBrokerSession
from .netlink.link import LinkEndpoint
from .netlink.transport import LABEL_CLIENT_HELLO, LABEL_CLOSE, LABEL_SERVER_FLIGHT, TransportError

logger = logging.getLogger(__name__)

H3_REQUEST_CANCELLED = 0x10C
_ACK_POLL = 0.01


def self_signed_certificate(common_name: str = "broker"):
    """Return ``(certificate, private_key)`` for a throwaway P-256 server identity."""
    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=1))
        .add_extension(
            x509.SubjectAlternativeName([x509.DNSName(common_name), x509.IPAddress(ipaddress.ip_address("127.0.0.1"))]),
            critical=False,
        )
        .sign(key, hashes.SHA256())
    )
    return cert, key


def server_configuration(certificate=None, private_key=None, idle_timeout: float = 60.0) -> QuicConfiguration:
    if certificate is None:
        certificate, private_key = self_signed_certificate()
    config = QuicConfiguration(is_client=False, alpn_protocols=[ALPN_H3, ALPN_MQTT], idle_timeout=idle_timeout)
    config.certificate = certificate
    config.private_key = private_key
    return config


def client_configuration(alpn: str, idle_timeout: float = 60.0) -> QuicConfiguration:
    import ssl

    config = QuicConfiguration(is_client=True, alpn_protocols=[alpn], idle_timeout=idle_timeout, server_name="broker")
    config.verify_mode = ssl.CERT_NONE
    return config


class StaticQpackH3(H3Connection):
    """H3Connection that advertises a zero-sized QPACK dynamic table."""

    def _get_local_settings(self) -> dict[int, int]:
        settings = super()._get_local_settings()
        settings[Setting.QPACK_MAX_TABLE_CAPACITY] = 0
        settings[Setting.QPACK_BLOCKED_STREAMS] = 0
        return settings


def _is_long_header(datagram: bytes) -> bool:
    return bool(datagram) and datagram[0] & 0x80 != 0


def _is_initial(datagram: bytes) -> bool:
    return _is_long_header(datagram) and (datagram[0] & 0x30) == 0


class QuicDriver:
    """Pumps one aioquic connection through a link endpoint."""

    def __init__(self, endpoint: LinkEndpoint, quic: QuicConnection, *, peer: str | None = None) -> None:
        self.endpoint = endpoint
        self.quic = quic
        self.loop = endpoint.loop
        self.peer = peer
        self.is_client = quic.configuration.is_client
        self.on_event: Callable[[QuicEvent], None] | None = None
        self.handshake_complete: asyncio.Future[None] = self.loop.create_future()
        self.closed: asyncio.Future[Exception | None] = self.loop.create_future()
        self.first_hello_at: float | None = None
        self._heard_peer = False
        self._pending_labels: list[str] = []
        self._timer: asyncio.TimerHandle | None = None
        self._timer_at: float | None = None
        self._transmit_scheduled = False

    @property
    def addr(self) -> tuple[str, int]:
        return (self.peer or "broker", 0)

    def connect(self) -> None:
        self.quic.connect(self.addr, now=self.loop.time())
        self.transmit()

    def label_next(self, label: str) -> None:
        """Tag the next 1-RTT datagram with ``label``."""
        if label not in self._pending_labels:
            self._pending_labels.append(label)

    def datagram_received(self, datagram: bytes) -> None:
        self._heard_peer = True
        self.quic.receive_datagram(datagram, self.addr, now=self.loop.time())
        self._process_events()
        self.transmit()

    def schedule_transmit(self) -> None:
        if not self._transmit_scheduled:
            self._transmit_scheduled = True
            self.loop.call_soon(self.transmit)

    def transmit(self) -> None:
        self._transmit_scheduled = False
        for datagram, _addr in self.quic.datagrams_to_send(now=self.loop.time()):
            labels: tuple[str, ...] = ()
            long_header = _is_long_header(datagram)
            if self.is_client and _is_initial(datagram) and not self._heard_peer:
                labels = (LABEL_CLIENT_HELLO,)
                if self.first_hello_at is None:
                    self.first_hello_at = self.loop.time()
            elif not self.is_client and long_header and not self.handshake_complete.done():
                labels = (LABEL_SERVER_FLIGHT,)
            if self._pending_labels and (not long_header or self.handshake_complete.done()):
                labels += tuple(self._pending_labels)
                self._pending_labels = []
            if self.is_client:
                self.endpoint.send_datagram(datagram, labels=labels)
            else:
                self.endpoint.send_datagram(datagram, to=self.peer, labels=labels)
        self._rearm_timer()

    def _rearm_timer(self) -> None:
        deadline = self.quic.get_timer()
        if deadline == self._timer_at:
            return
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        self._timer_at = deadline
        if deadline is not None:
            self._timer = self.loop.call_at(deadline, self._timer_fired)

    def _timer_fired(self) -> None:
        self._timer = None
        self._timer_at = None
        self.quic.handle_timer(now=self.loop.time())
        self._process_events()
        self.transmit()

    def _process_events(self) -> None:
        while (event := self.quic.next_event()) is not None:
            if isinstance(event, HandshakeCompleted) and not self.handshake_complete.done():
                self.handshake_complete.set_result(None)
            elif isinstance(event, ConnectionTerminated):
                self._terminated(event)
            if self.on_event is not None:
                self.on_event(event)

    def _terminated(self, event: ConnectionTerminated) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        error = None if event.error_code == 0 else TransportError(f"QUIC error {event.error_code}: {event.reason_phrase}")
        if not self.handshake_complete.done():
            self.handshake_complete.set_exception(error or TransportError("closed during handshake"))
            self.handshake_complete.exception()
        if not self.closed.done():
            self.closed.set_result(error)

    @property
    def is_closed(self) -> bool:
        return self.closed.done()

    async def wait_stream_acked(self, stream_id: int) -> None:
        # aioquic exposes no public per-stream ack signal; the sender trims its buffer on ack
        while not self.is_closed:
            stream = self.quic._streams.get(stream_id)
            sender = getattr(stream, "sender", None)
            if sender is None or sender._buffer_start == sender._buffer_stop:
                return
            await asyncio.sleep(_ACK_POLL)

    def close(self) -> None:
        if not self.is_closed:
            self.quic.close()
            self.label_next(LABEL_CLOSE)
            self.transmit()
            self._terminated(ConnectionTerminated(error_code=0, frame_type=None, reason_phrase=""))


def open_quic_client(endpoint: LinkEndpoint, alpn: str, configuration: QuicConfiguration | None = None) -> QuicDriver:
    """Create a client driver on ``endpoint``; call :meth:`QuicDriver.connect` to start."""
    quic = QuicConnection(configuration=configuration or client_configuration(alpn))
    driver = QuicDriver(endpoint, quic)
    endpoint.on_datagram = lambda datagram, _peer: driver.datagram_received(datagram)
    return driver


# -- HTTP/3 -----------------------------------------------------------------------


class QuicH3Channel:
    """:class:`~h3pubsub.h3.client.H3Channel` on aioquic's HTTP/3 layer."""

    def __init__(self, driver: QuicDriver, authority: str = "broker") -> None:
        self.driver = driver
        self.authority = authority
        self.h3 = StaticQpackH3(driver.quic)
        self._listeners: dict[int, ResponseListener] = {}
        driver.on_event = self._quic_event

    def open_request(self, method: str, path: str, body: bytes | None, listener: ResponseListener) -> int:
        if self.driver.is_closed:
            raise TransportError("connection closed")
        stream_id = self.driver.quic.get_next_available_stream_id()
        self._listeners[stream_id] = listener
        self.h3.send_headers(stream_id, request_headers(method, self.authority, path, body), end_stream=body is None)
        self.driver.label_next(LABEL_HEADERS)
        if body is not None:
            self.h3.send_data(stream_id, body, end_stream=True)
            self.driver.label_next(LABEL_DATA)
        self.driver.schedule_transmit()
        return stream_id

    def cancel_request(self, stream_id: int) -> None:
        self._listeners.pop(stream_id, None)
        if not self.driver.is_closed:
            self.driver.quic.stop_stream(stream_id, H3_REQUEST_CANCELLED)
            self.driver.schedule_transmit()

    def close(self) -> None:
        self.driver.close()

    def _quic_event(self, event: QuicEvent) -> None:
        if isinstance(event, StreamReset):
            listener = self._listeners.pop(event.stream_id, None)
            if listener is not None:
                listener.request_failed(StreamEndedAbnormally(f"stream {event.stream_id} reset by broker"))
            return
        if isinstance(event, ConnectionTerminated):
            listeners, self._listeners = self._listeners, {}
            for listener in listeners.values():
                listener.request_failed(StreamEndedAbnormally(f"connection lost: {event.reason_phrase or event.error_code}"))
            return
        for h3_event in self.h3.handle_event(event):
            self._h3_event(h3_event)

    def _h3_event(self, event: H3Event) -> None:
        listener = self._listeners.get(getattr(event, "stream_id", -1))
        if listener is None:
            return
        if isinstance(event, HeadersReceived):
            listener.response_headers(int(header_value(event.headers, b":status") or 0))
        elif isinstance(event, DataReceived) and event.data:
            listener.response_data(event.data)
        if getattr(event, "stream_ended", False):
            self._listeners.pop(event.stream_id, None)
            listener.response_ended()


class _QuicH3BrokerApp:
    def __init__(self, driver: QuicDriver, broker: Broker) -> None:
        self.driver = driver
        self.h3 = StaticQpackH3(driver.quic)
        self.session = H3BrokerSession(broker, self)
        self._requests: dict[int, list] = {}

    def send_headers(self, stream_id: int, headers: list[tuple[bytes, bytes]], end_stream: bool) -> None:
        if not self.driver.is_closed:
            self.h3.send_headers(stream_id, headers, end_stream=end_stream)
            self.driver.schedule_transmit()

    def send_data(self, stream_id: int, data: bytes, end_stream: bool) -> None:
        if not self.driver.is_closed:
            self.h3.send_data(stream_id, data, end_stream=end_stream)
            self.driver.schedule_transmit()

    def quic_event(self, event: QuicEvent) -> None:
        if isinstance(event, (StreamReset, StopSendingReceived)):
            self._requests.pop(event.stream_id, None)
            self.session.cancel_stream(event.stream_id)
            return
        if isinstance(event, ConnectionTerminated):
            self._requests.clear()
            self.session.connection_lost()
            return
        for h3_event in self.h3.handle_event(event):
            stream_id = getattr(h3_event, "stream_id", None)
            if stream_id is None:
                continue
            request = self._requests.setdefault(stream_id, ["", "", bytearray()])
            if isinstance(h3_event, HeadersReceived):
                request[0] = (header_value(h3_event.headers, b":method") or b"").decode()
                request[1] = (header_value(h3_event.headers, b":path") or b"").decode()
            elif isinstance(h3_event, DataReceived):
                request[2] += h3_event.data
            if getattr(h3_event, "stream_ended", False):
                method, path, body = self._requests.pop(stream_id)
                self.session.handle_request(stream_id, method, path, bytes(body))


# -- MQTT -------------------------------------------------------------------------


class QuicMqttChannel:
    """MQTT stream channel on one client-opened aioquic bidirectional stream."""

    def __init__(self, driver: QuicDriver) -> None:
        self.driver = driver
        self.stream_id = driver.quic.get_next_available_stream_id()
        self.on_data: Callable[[bytes], None] | None = None
        self.on_closed: Callable[[Exception | None], None] | None = None
        driver.on_event = self._quic_event

    def write(self, data: bytes, label: str | None = None) -> None:
        if self.driver.is_closed:
            raise TransportError("connection closed")
        self.driver.quic.send_stream_data(self.stream_id, data, end_stream=False)
        if label:
            self.driver.label_next(label)
        self.driver.schedule_transmit()

    async def wait_acked(self) -> None:
        await self.driver.wait_stream_acked(self.stream_id)

    def close(self) -> None:
        self.driver.close()

    def _quic_event(self, event: QuicEvent) -> None:
        if isinstance(event, StreamDataReceived) and event.stream_id == self.stream_id:
            if event.data and self.on_data is not None:
                self.on_data(event.data)
            if event.end_stream and self.on_closed is not None:
                self.on_closed(None)
        elif isinstance(event, StreamReset) and event.stream_id == self.stream_id:
            if self.on_closed is not None:
                self.on_closed(ConnectionError("MQTT stream reset by broker"))
        elif isinstance(event, ConnectionTerminated) and self.on_closed is not None:
            self.on_closed(None if event.error_code == 0 else TransportError(event.reason_phrase))


class _QuicMqttBrokerApp:
    def __init__(self, driver: QuicDriver, broker: Broker, credentials: Mapping[str, bytes] | None) -> None:
        self.driver = driver
        self.broker = broker
        self.credentials = credentials
        self.stream_id: int | None = None
        self.session: MqttBrokerSession | None = None

    def _send(self, data: bytes, label: str) -> None:
        if not self.driver.is_closed and self.stream_id is not None:
            self.driver.quic.send_stream_data(self.stream_id, data, end_stream=False)
            self.driver.label_next(label)
            self.driver.schedule_transmit()

    def _close(self) -> None:
        if not self.driver.is_closed and self.stream_id is not None:
            self.driver.quic.send_stream_data(self.stream_id, b"", end_stream=True)
            self.driver.schedule_transmit()

    def quic_event(self, event: QuicEvent) -> None:
        if isinstance(event, StreamDataReceived):
            if self.stream_id is None and event.stream_id & 0x3 == 0:
                self.stream_id = event.stream_id
                self.session = MqttBrokerSession(self.broker, self._send, self._close, self.credentials)
            if event.stream_id != self.stream_id or self.session is None:
                return
            if event.data:
                self.session.feed(event.data)
            if event.end_stream:
                self.session.connection_lost()
        elif isinstance(event, (StreamReset, ConnectionTerminated)) and self.session is not None:
            if isinstance(event, ConnectionTerminated) or event.stream_id == self.stream_id:
                self.session.connection_lost()


# -- broker server ----------------------------------------------------------------


class QuicBrokerServer:
    """Accepts aioquic connections on the broker endpoint and serves H3 and MQTT by ALPN."""

    def __init__(
        self,
        endpoint: LinkEndpoint,
        broker: Broker,
        *,
        configuration: QuicConfiguration | None = None,
        credentials: Mapping[str, bytes] | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.broker = broker
        self.configuration = configuration or server_configuration()
        self.credentials = credentials
        self.drivers: dict[str, QuicDriver] = {}
        endpoint.on_datagram = self.datagram_received

    def datagram_received(self, datagram: bytes, flow: str) -> None:
        driver = self.drivers.get(flow)
        if driver is None:
            driver = self._accept(datagram, flow)
            if driver is None:
                return
        driver.datagram_received(datagram)

    def _accept(self, datagram: bytes, flow: str) -> QuicDriver | None:
        try:
            header = pull_quic_header(Buffer(data=datagram), host_cid_length=self.configuration.connection_id_length)
        except ValueError:
            return None
        if not _is_initial(datagram):
            return None
        quic = QuicConnection(
            configuration=self.configuration, original_destination_connection_id=header.destination_cid
        )
        driver = QuicDriver(self.endpoint, quic, peer=flow)
        holder: dict[str, Callable[[QuicEvent], None]] = {}

        def dispatch(event: QuicEvent) -> None:
            if "app" not in holder and isinstance(event, HandshakeCompleted):
                if event.alpn_protocol == ALPN_H3:
                    holder["app"] = _QuicH3BrokerApp(driver, self.broker).quic_event
                elif event.alpn_protocol == ALPN_MQTT:
                    holder["app"] = _QuicMqttBrokerApp(driver, self.broker, self.credentials).quic_event
            app = holder.get("app")
            if app is not None:
                app(event)

        driver.on_event = dispatch
        self.drivers[flow] = driver
        return driver
