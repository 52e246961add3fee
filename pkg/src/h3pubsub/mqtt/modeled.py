"""MQTT over the modeled transport: one client-opened bidirectional stream."""

from __future__ import annotations

import asyncio
import logging
from typing import Callable, Mapping

from ..core import Broker
from ..netlink.transport import ModeledConnection, TransportError
from .session import MqttBrokerSession

logger = logging.getLogger(__name__)

MQTT_STREAM_ID = 0


class ModeledMqttChannel:
    """Client stream channel; writes issued before the handshake wait for it."""

    def __init__(self, conn: ModeledConnection) -> None:
        self.conn = conn
        conn.app = self
        self.on_data: Callable[[bytes], None] | None = None
        self.on_closed: Callable[[Exception | None], None] | None = None
        self.stream_id = conn.get_next_stream_id()
        self._queued: list[tuple[bytes, str | None]] = []
        self._ready = False

    def write(self, data: bytes, label: str | None = None) -> None:
        if self.conn.state == "closed":
            raise TransportError("connection closed")
        if self._ready:
            self.conn.send_stream_data(self.stream_id, data, label=label)
        else:
            self._queued.append((data, label))

    async def wait_acked(self) -> None:
        if not self._ready:
            await asyncio.shield(self.conn.handshake_complete)
        await self.conn.wait_acked()

    def close(self) -> None:
        self.conn.close()

    def handshake_completed(self) -> None:
        self._ready = True
        queued, self._queued = self._queued, []
        for data, label in queued:
            self.conn.send_stream_data(self.stream_id, data, label=label)

    def stream_data_received(self, stream_id: int, data: bytes, fin: bool) -> None:
        if stream_id != self.stream_id:
            return
        if data and self.on_data is not None:
            self.on_data(data)
        if fin and self.on_closed is not None:
            self.on_closed(None)

    def stream_reset(self, stream_id: int) -> None:
        if stream_id == self.stream_id and self.on_closed is not None:
            self.on_closed(ConnectionError("MQTT stream reset by broker"))

    def connection_terminated(self, error: Exception | None) -> None:
        if self.on_closed is not None:
            self.on_closed(error)


class ModeledMqttBrokerApp:
    """Broker side: runs an :class:`MqttBrokerSession` on the client's first bidi stream."""

    def __init__(
        self, conn: ModeledConnection, broker: Broker, credentials: Mapping[str, bytes] | None = None
    ) -> None:
        self.conn = conn
        self.broker = broker
        self.credentials = credentials
        self.stream_id: int | None = None
        self.session: MqttBrokerSession | None = None

    def _send(self, data: bytes, label: str) -> None:
        if self.conn.state != "closed" and self.stream_id is not None:
            self.conn.send_stream_data(self.stream_id, data, label=label)

    def _close(self) -> None:
        if self.conn.state != "closed" and self.stream_id is not None:
            self.conn.send_stream_data(self.stream_id, b"", end_stream=True)

    def handshake_completed(self) -> None:
        pass

    def stream_data_received(self, stream_id: int, data: bytes, fin: bool) -> None:
        if self.stream_id is None:
            if stream_id & 0x3 != 0:
                return
            self.stream_id = stream_id
            self.session = broker_handle_stream(self.broker, self._send, self._close, self.credentials)
        if stream_id != self.stream_id or self.session is None:
            return
        if data:
            self.session.feed(data)
        if fin:
            self.session.connection_lost()

    def stream_reset(self, stream_id: int) -> None:
        if stream_id == self.stream_id and self.session is not None:
            self.session.connection_lost()

    def connection_terminated(self, error: Exception | None) -> None:
        if self.session is not None:
            self.session.connection_lost()


def broker_handle_stream(
    broker: Broker,
    send: Callable[[bytes, str], None],
    close: Callable[[], None],
    credentials: Mapping[str, bytes] | None = None,
) -> MqttBrokerSession:
    """Attach broker-side MQTT handling to an accepted stream."""
    return MqttBrokerSession(broker, send, close, credentials)
