"""Async MQTT client over a single bidirectional stream."""

from __future__ import annotations

import asyncio
import itertools
from typing import Callable, Protocol

from .packets import SUCCESS, ConnAck, Connect, Disconnect, Publish, SubAck, Subscribe
from .session import ClientSession, Phase, ProtocolViolation, label_for


class StreamChannel(Protocol):
    """One bidirectional byte stream inside a QUIC connection."""

    on_data: Callable[[bytes], None] | None
    on_closed: Callable[[Exception | None], None] | None

    def write(self, data: bytes, label: str | None = None) -> None: ...

    async def wait_acked(self) -> None: ...

    def close(self) -> None: ...


class ConnectionRefused(ConnectionError):
    def __init__(self, reason_code: int) -> None:
        super().__init__(f"CONNACK reason {reason_code:#04x}")
        self.reason_code = reason_code


class MqttClient:
    def __init__(self, channel: StreamChannel, client_id: str, loop: asyncio.AbstractEventLoop | None = None) -> None:
        self.channel = channel
        self.client_id = client_id
        self.loop = loop or asyncio.get_event_loop()
        self.session = ClientSession()
        self._connack: asyncio.Future[ConnAck] = self.loop.create_future()
        self._subacks: dict[int, asyncio.Future[SubAck]] = {}
        self._handlers: dict[str, Callable[[bytes], None]] = {}
        self._packet_ids = itertools.count(1)
        self.closed: asyncio.Future[Exception | None] = self.loop.create_future()
        channel.on_data = self._data_received
        channel.on_closed = self._channel_closed

    @property
    def phase(self) -> Phase:
        return self.session.phase

    def _write(self, packet) -> None:
        self.channel.write(self.session.send(packet), label_for(packet))

    async def connect(
        self,
        username: str | None = None,
        password: bytes | None = None,
        auth_method: str | None = None,
    ) -> int:
        """Send CONNECT and wait for CONNACK; returns its reason code."""
        self._write(Connect(self.client_id, username=username, password=password, auth_method=auth_method))
        connack = await self._connack
        return connack.reason_code

    def publish_nowait(self, topic: str, payload: bytes) -> None:
        """Write one QoS 0 PUBLISH; raises :class:`ProtocolViolation` if the session forbids it."""
        if self.session.phase is Phase.IDLE:
            raise ProtocolViolation("publish before CONNECT")
        self._write(Publish(topic, bytes(payload)))

    async def publish(self, topic: str, payload: bytes) -> None:
        self.publish_nowait(topic, payload)

    async def subscribe(self, topic: str, on_event: Callable[[bytes], None]) -> int:
        packet_id = next(self._packet_ids)
        waiter = self.loop.create_future()
        self._subacks[packet_id] = waiter
        self._handlers[topic] = on_event
        try:
            self._write(Subscribe(packet_id, topic))
        except ProtocolViolation:
            del self._subacks[packet_id]
            raise
        suback = await waiter
        if suback.reason_code != SUCCESS:
            self._handlers.pop(topic, None)
        return suback.reason_code

    async def disconnect(self) -> None:
        if self.session.can_send(Disconnect()):
            self._write(Disconnect())
        try:
            await self.channel.wait_acked()
        finally:
            self.channel.close()

    def _data_received(self, data: bytes) -> None:
        try:
            packets = self.session.receive(data)
        except ValueError as exc:
            self._channel_closed(exc)
            self.channel.close()
            return
        for packet in packets:
            if isinstance(packet, ConnAck) and not self._connack.done():
                self._connack.set_result(packet)
            elif isinstance(packet, SubAck):
                waiter = self._subacks.pop(packet.packet_id, None)
                if waiter is not None and not waiter.done():
                    waiter.set_result(packet)
            elif isinstance(packet, Publish):
                handler = self._handlers.get(packet.topic)
                if handler is not None:
                    handler(packet.payload)
            elif isinstance(packet, Disconnect):
                self._channel_closed(ConnectionError(f"broker sent DISCONNECT {packet.reason_code:#04x}"))

    def _channel_closed(self, error: Exception | None) -> None:
        failure = error or ConnectionError("stream closed")
        pending = [self._connack, *self._subacks.values()]
        self._subacks.clear()
        for future in pending:
            if not future.done():
                future.set_exception(failure)
                future.exception()
        if not self.closed.done():
            self.closed.set_result(error)


# functional forms, client first
async def client_connect(
    client: MqttClient, username: str | None = None, password: bytes | None = None, auth_method: str | None = None
) -> int:
    return await client.connect(username, password, auth_method)


async def client_publish(client: MqttClient, topic: str, payload: bytes) -> None:
    await client.publish(topic, payload)


async def client_subscribe(client: MqttClient, topic: str, on_event: Callable[[bytes], None]) -> int:
    return await client.subscribe(topic, on_event)
