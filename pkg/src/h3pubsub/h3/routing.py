"""Request routing: HTTP method + ``/topic/{name}`` onto broker operations.

=======  ==================  =========================================
method   broker operation    status
=======  ==================  =========================================
HEAD     topic_exists        200 exists, 404 absent
PUT      create_topic        201 created, 200 already existed
DELETE   delete_topic        200 deleted, 404 absent
POST     publish             200 stored, 404 absent, 413 too large
GET      subscribe           200 + streamed event frames, 404 absent
=======  ==================  =========================================

A malformed path, unknown method or invalid topic name is always 400.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Protocol
from urllib.parse import unquote

from ..core import (
    Broker,
    PayloadTooLarge,
    SubscriberHandle,
    TopicName,
    TopicNotFound,
    UnknownHandle,
    ValidationError,
)
from .framing import encode_event_frame

logger = logging.getLogger(__name__)

METHODS = ("HEAD", "PUT", "DELETE", "POST", "GET")
PATH_PREFIX = "/topic/"
CONTENT_TYPE = "application/octet-stream"
STATUS_CODES = frozenset({200, 201, 400, 404, 413})


class BadRequest(ValueError):
    pass


@dataclass(frozen=True)
class Route:
    method: str
    topic: TopicName


@dataclass(frozen=True)
class StatusOutcome:
    code: int
    body: bytes | None = None

    @property
    def ok(self) -> bool:
        return 200 <= self.code < 300


def topic_path(topic: str) -> str:
    return PATH_PREFIX + topic


def parse_route(method: str, path: str) -> Route:
    method = method.upper()
    if method not in METHODS:
        raise BadRequest(f"unsupported method {method}")
    path = path.split("?", 1)[0]
    if not path.startswith(PATH_PREFIX):
        raise BadRequest(f"path {path!r} does not match /topic/{{name}}")
    try:
        topic = TopicName(unquote(path[len(PATH_PREFIX) :], errors="strict"))
    except (ValidationError, UnicodeDecodeError) as exc:
        raise BadRequest(str(exc)) from exc
    return Route(method, topic)


class SubscriptionStream:
    """An open GET: the 200 response whose body is a stream of event frames."""

    code = 200

    def __init__(self, broker: Broker, handle: SubscriberHandle) -> None:
        self.broker = broker
        self.handle = handle

    def attach(self, on_frame: Callable[[bytes], None], on_end: Callable[[], None]) -> None:
        """Start pushing encoded frames; ``on_end`` fires when the topic goes away."""
        self.handle.sink.attach(
            lambda message: on_frame(encode_event_frame(message, self.broker.max_message_size)),
            on_end,
        )

    def cancel(self) -> None:
        try:
            self.broker.unsubscribe(self.handle)
        except UnknownHandle:
            pass


def route_request(
    broker: Broker, method: str, path: str, body: bytes = b""
) -> StatusOutcome | SubscriptionStream:
    try:
        route = parse_route(method, path)
    except BadRequest as exc:
        logger.debug("rejecting %s %s: %s", method, path, exc)
        return StatusOutcome(400)

    topic = route.topic
    if route.method == "HEAD":
        return StatusOutcome(200 if broker.topic_exists(topic) else 404)
    if route.method == "PUT":
        return StatusOutcome(201 if broker.create_topic(topic) else 200)
    try:
        if route.method == "DELETE":
            broker.delete_topic(topic)
            return StatusOutcome(200)
        if route.method == "POST":
            broker.publish(topic, body)
            return StatusOutcome(200)
        return SubscriptionStream(broker, broker.subscribe(topic))
    except TopicNotFound:
        return StatusOutcome(404)
    except PayloadTooLarge:
        return StatusOutcome(413)


class ResponseWriter(Protocol):
    def send_headers(
        self, stream_id: int, headers: list[tuple[bytes, bytes]], end_stream: bool
    ) -> None: ...

    def send_data(self, stream_id: int, data: bytes, end_stream: bool) -> None: ...


class H3BrokerSession:
    """Broker side of one HTTP/3 connection, independent of the QUIC stack.

    The stack glue decodes requests and calls :meth:`handle_request`;
    responses go back out through ``writer``.
    """

    def __init__(self, broker: Broker, writer: ResponseWriter) -> None:
        self.broker = broker
        self.writer = writer
        self.subscriptions: dict[int, SubscriptionStream] = {}

    def handle_request(self, stream_id: int, method: str, path: str, body: bytes) -> int:
        outcome = route_request(self.broker, method, path, body)
        headers = [(b":status", str(outcome.code).encode())]
        if isinstance(outcome, SubscriptionStream):
            headers.append((b"content-type", CONTENT_TYPE.encode()))
            self.writer.send_headers(stream_id, headers, end_stream=False)
            self.subscriptions[stream_id] = outcome
            outcome.attach(
                lambda frame: self.writer.send_data(stream_id, frame, end_stream=False),
                lambda: self._subscription_ended(stream_id),
            )
            return outcome.code
        if outcome.body:
            headers.append((b"content-type", CONTENT_TYPE.encode()))
            self.writer.send_headers(stream_id, headers, end_stream=False)
            self.writer.send_data(stream_id, outcome.body, end_stream=True)
        else:
            self.writer.send_headers(stream_id, headers, end_stream=True)
        return outcome.code

    def _subscription_ended(self, stream_id: int) -> None:
        if self.subscriptions.pop(stream_id, None) is not None:
            self.writer.send_data(stream_id, b"", end_stream=True)

    def cancel_stream(self, stream_id: int) -> None:
        """The client abandoned ``stream_id``; drop its subscription quietly."""
        subscription = self.subscriptions.pop(stream_id, None)
        if subscription is not None:
            subscription.cancel()

    def connection_lost(self) -> None:
        subscriptions, self.subscriptions = self.subscriptions, {}
        for subscription in subscriptions.values():
            subscription.cancel()
