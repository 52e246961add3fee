"""Client SDK: pub-sub operations expressed as HTTP/3 requests.

The SDK talks to a *channel*, which owns the actual HTTP/3 connection.  Two
channels exist: one on the modeled transport (virtual time) and one on
aioquic (real QUIC).  Both deliver response events through the
:class:`ResponseListener` callbacks below.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Callable, Protocol

from .framing import EventFrameDecoder
from .routing import StatusOutcome, topic_path

logger = logging.getLogger(__name__)


class ResponseListener(Protocol):
    def response_headers(self, status: int) -> None: ...

    def response_data(self, data: bytes) -> None: ...

    def response_ended(self) -> None: ...

    def request_failed(self, exc: Exception) -> None: ...


class H3Channel(Protocol):
    def open_request(
        self, method: str, path: str, body: bytes | None, listener: ResponseListener
    ) -> int: ...

    def cancel_request(self, stream_id: int) -> None: ...

    def close(self) -> None: ...


class SubscriptionFailed(Exception):
    def __init__(self, outcome: StatusOutcome) -> None:
        super().__init__(f"subscription refused with status {outcome.code}")
        self.outcome = outcome


class StreamEndedAbnormally(ConnectionError):
    pass


class _Response:
    def __init__(self, loop: asyncio.AbstractEventLoop) -> None:
        self.status: asyncio.Future[int] = loop.create_future()
        self.done: asyncio.Future[None] = loop.create_future()
        self.body = bytearray()

    def response_headers(self, status: int) -> None:
        if not self.status.done():
            self.status.set_result(status)

    def response_data(self, data: bytes) -> None:
        self.body += data

    def response_ended(self) -> None:
        if not self.status.done():
            self.status.set_exception(StreamEndedAbnormally("stream ended before response headers"))
        if not self.done.done():
            self.done.set_result(None)

    def request_failed(self, exc: Exception) -> None:
        for future in (self.status, self.done):
            if not future.done():
                future.set_exception(exc)
                future.exception()


class Subscription(_Response):
    """A live GET on a topic.

    ``on_event`` runs once per received event, in publish order.  ``ended``
    resolves when the broker closes the stream (topic deleted) and raises
    :class:`StreamEndedAbnormally` if the connection is lost first.
    """

    def __init__(self, client: H3Client, topic: str, on_event: Callable[[bytes], None]) -> None:
        super().__init__(client.loop)
        self.client = client
        self.topic = topic
        self.on_event = on_event
        self.stream_id: int | None = None
        self.cancelled = False
        self.events_received = 0
        self._decoder = EventFrameDecoder()

    @property
    def ended(self) -> asyncio.Future[None]:
        return self.done

    def response_data(self, data: bytes) -> None:
        if self.cancelled:
            return
        for payload in self._decoder.feed(data):
            self.events_received += 1
            self.on_event(payload)

    def response_ended(self) -> None:
        if self._decoder.pending and not self.done.done():
            self.request_failed(StreamEndedAbnormally("stream ended inside an event frame"))
            return
        super().response_ended()

    def cancel(self) -> None:
        """Stop listening; the broker unsubscribes when it sees the stream abandoned."""
        if self.cancelled or self.done.done():
            return
        self.cancelled = True
        self.client.channel.cancel_request(self.stream_id)
        self.done.set_result(None)


class H3Client:
    def __init__(self, channel: H3Channel, loop: asyncio.AbstractEventLoop | None = None) -> None:
        self.channel = channel
        self.loop = loop or asyncio.get_event_loop()

    async def request(self, method: str, topic: str, body: bytes | None = None) -> StatusOutcome:
        response = _Response(self.loop)
        self.channel.open_request(method, topic_path(topic), body, response)
        status = await response.status
        await response.done
        return StatusOutcome(status, bytes(response.body) or None)

    async def exists(self, topic: str) -> StatusOutcome:
        return await self.request("HEAD", topic)

    async def create(self, topic: str) -> StatusOutcome:
        return await self.request("PUT", topic)

    async def delete(self, topic: str) -> StatusOutcome:
        return await self.request("DELETE", topic)

    async def publish(self, topic: str, payload: bytes) -> StatusOutcome:
        """POST ``payload``; the body goes out with the request headers, no pre-exchange."""
        return await self.request("POST", topic, bytes(payload))

    async def subscribe(self, topic: str, on_event: Callable[[bytes], None]) -> Subscription:
        subscription = Subscription(self, topic, on_event)
        subscription.stream_id = self.channel.open_request("GET", topic_path(topic), None, subscription)
        status = await subscription.status
        if status != 200:
            try:
                await subscription.done
            except StreamEndedAbnormally:
                pass
            raise SubscriptionFailed(StatusOutcome(status))
        return subscription

    def close(self) -> None:
        self.channel.close()


# functional forms, connection first
async def client_publish(conn: H3Client, topic: str, payload: bytes) -> StatusOutcome:
    return await conn.publish(topic, payload)


async def client_subscribe(conn: H3Client, topic: str, on_event: Callable[[bytes], None]) -> Subscription:
    return await conn.subscribe(topic, on_event)


async def client_exists(conn: H3Client, topic: str) -> StatusOutcome:
    return await conn.exists(topic)


async def client_create(conn: H3Client, topic: str) -> StatusOutcome:
    return await conn.create(topic)


async def client_delete(conn: H3Client, topic: str) -> StatusOutcome:
    return await conn.delete(topic)
