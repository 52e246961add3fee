"""MQTT client and broker state machines, independent of the transport.

Both sides exchange raw bytes with whatever carries the single
bidirectional stream; the QUIC glue lives elsewhere.
"""

from __future__ import annotations

import enum
import hmac
import logging
from typing import Callable, Mapping

from ..core import Broker, PayloadTooLarge, SubscriberHandle, TopicName, TopicNotFound, UnknownHandle, ValidationError
from .packets import (
    BAD_AUTHENTICATION_METHOD,
    BAD_USERNAME_OR_PASSWORD,
    MALFORMED_PACKET,
    PACKET_TOO_LARGE,
    PROTOCOL_ERROR,
    SUCCESS,
    TOPIC_FILTER_INVALID,
    UNSPECIFIED_ERROR,
    Auth,
    ConnAck,
    Connect,
    Disconnect,
    MalformedPacket,
    MqttPacket,
    PacketStream,
    Publish,
    SubAck,
    Subscribe,
    encode_packet,
    packet_name,
)

logger = logging.getLogger(__name__)

ALPN_MQTT = "mqtt"


def label_for(packet: MqttPacket) -> str:
    return f"mqtt:{packet_name(packet)}"


class ProtocolViolation(Exception):
    """The local side tried to send something the protocol forbids right now."""


class Phase(enum.Enum):
    IDLE = "idle"
    CONNECT_SENT = "connect_sent"
    ESTABLISHED = "established"
    CLOSED = "closed"


class ClientSession:
    """Client-side packet gatekeeper.

    Once CONNECT carried credentials or an authentication method the
    session is *auth-gated*: until CONNACK arrives only AUTH and DISCONNECT
    may be sent.  Without authentication MQTT 5 lets a client pipeline
    packets straight after CONNECT, and so does this session.
    """

    def __init__(self) -> None:
        self.phase = Phase.IDLE
        self.auth_gated = False
        self.connack: ConnAck | None = None
        self._stream = PacketStream()

    def can_send(self, packet: MqttPacket) -> bool:
        if self.phase is Phase.CLOSED:
            return False
        if isinstance(packet, Connect):
            return self.phase is Phase.IDLE
        if self.phase is Phase.IDLE:
            return False
        if self.phase is Phase.CONNECT_SENT and self.auth_gated:
            return isinstance(packet, (Auth, Disconnect))
        return True

    def send(self, packet: MqttPacket) -> bytes:
        if not self.can_send(packet):
            raise ProtocolViolation(f"cannot send {packet_name(packet)} in phase {self.phase.value}")
        if isinstance(packet, Connect):
            self.phase = Phase.CONNECT_SENT
            self.auth_gated = packet.auth_gated
        elif isinstance(packet, Disconnect):
            self.phase = Phase.CLOSED
        return encode_packet(packet)

    def receive(self, data: bytes) -> list[MqttPacket]:
        packets = self._stream.feed(data)
        for packet in packets:
            if isinstance(packet, ConnAck) and self.phase is Phase.CONNECT_SENT:
                self.connack = packet
                self.phase = Phase.ESTABLISHED if packet.reason_code == SUCCESS else Phase.CLOSED
            elif isinstance(packet, Disconnect):
                self.phase = Phase.CLOSED
        return packets


SendFn = Callable[[bytes, str], None]


class MqttBrokerSession:
    """Broker side of one MQTT connection, bridging packets into a :class:`Broker`.

    ``send(data, label)`` writes to the client stream and ``close()`` ends
    it.  When ``credentials`` is given, CONNECT must carry a matching
    username and password.
    """

    def __init__(
        self,
        broker: Broker,
        send: SendFn,
        close: Callable[[], None],
        credentials: Mapping[str, bytes] | None = None,
    ) -> None:
        self.broker = broker
        self._send = send
        self._close = close
        self.credentials = credentials
        self.connected = False
        self.closed = False
        self.client_id: str | None = None
        self.subscriptions: dict[str, SubscriberHandle] = {}
        self._stream = PacketStream()

    def send(self, packet: MqttPacket) -> None:
        if not self.closed:
            self._send(encode_packet(packet), label_for(packet))

    def feed(self, data: bytes) -> None:
        if self.closed:
            return
        try:
            packets = self._stream.feed(data)
        except MalformedPacket as exc:
            logger.debug("malformed packet from %s: %s", self.client_id, exc)
            self._fail(MALFORMED_PACKET)
            return
        for packet in packets:
            if self.closed:
                return
            self._handle(packet)

    def _fail(self, reason: int) -> None:
        self.send(Disconnect(reason))
        self.shutdown()

    def shutdown(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._drop_subscriptions()
        self._close()

    def connection_lost(self) -> None:
        self.closed = True
        self._drop_subscriptions()

    def _drop_subscriptions(self) -> None:
        subscriptions, self.subscriptions = self.subscriptions, {}
        for handle in subscriptions.values():
            try:
                self.broker.unsubscribe(handle)
            except UnknownHandle:
                pass

    def _authenticate(self, packet: Connect) -> int:
        if packet.auth_method is not None:
            # enhanced (challenge/response) authentication is not offered
            return BAD_AUTHENTICATION_METHOD
        if self.credentials is None:
            return SUCCESS
        if packet.username is None or packet.password is None:
            return BAD_USERNAME_OR_PASSWORD
        expected = self.credentials.get(packet.username)
        if expected is None or not hmac.compare_digest(expected, packet.password):
            return BAD_USERNAME_OR_PASSWORD
        return SUCCESS

    def _handle(self, packet: MqttPacket) -> None:
        if not self.connected:
            if not isinstance(packet, Connect):
                self._fail(PROTOCOL_ERROR)
                return
            reason = self._authenticate(packet)
            self.send(ConnAck(reason))
            if reason != SUCCESS:
                self.shutdown()
                return
            self.connected = True
            self.client_id = packet.client_id
            return

        if isinstance(packet, Publish):
            try:
                self.broker.publish(packet.topic, packet.payload)
            except PayloadTooLarge:
                self._fail(PACKET_TOO_LARGE)
            except (TopicNotFound, ValidationError):
                # QoS 0 has no way to report this; the message is dropped
                logger.debug("dropping PUBLISH to unknown topic %r", packet.topic)
        elif isinstance(packet, Subscribe):
            self.send(SubAck(packet.packet_id, self._subscribe(packet.topic)))
        elif isinstance(packet, Disconnect):
            self.shutdown()
        else:
            self._fail(PROTOCOL_ERROR)

    def _subscribe(self, topic: str) -> int:
        if topic in self.subscriptions:
            return SUCCESS
        try:
            handle = self.broker.subscribe(TopicName(topic))
        except ValidationError:
            return TOPIC_FILTER_INVALID
        except TopicNotFound:
            return UNSPECIFIED_ERROR
        self.subscriptions[topic] = handle
        handle.sink.attach(
            lambda message: self.send(Publish(message.topic, message.payload)),
            lambda: self.subscriptions.pop(topic, None),
        )
        return SUCCESS
