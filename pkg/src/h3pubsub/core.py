"""Transport-agnostic broker state.

Holds the topic registry, per-topic subscriber lists and retained messages,
and performs publish fan-out.  Both protocol front-ends (HTTP/3 and MQTT)
drive the same :class:`Broker`, so a scenario does identical broker work
whichever wire protocol carried the request.
"""

from __future__ import annotations

import itertools
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator

MAX_TOPIC_BYTES = 255
DEFAULT_MAX_MESSAGE_SIZE = 1 << 20
DEFAULT_RETAINED_CAPACITY = 100
DEFAULT_SINK_CAPACITY = 64

_TOPIC_CHARSET = re.compile(r"[A-Za-z0-9_.\-]+")


class TopicRule(Enum):
    EMPTY = "empty"
    TOO_LONG = "too_long"
    ILLEGAL_CHARACTER = "illegal_character"


class BrokerError(Exception):
    pass


class ValidationError(BrokerError, ValueError):
    """A topic name broke one of the naming rules; ``rule`` says which."""

    def __init__(self, rule: TopicRule, raw: str) -> None:
        super().__init__(f"invalid topic name {raw!r}: {rule.value}")
        self.rule = rule
        self.raw = raw


class TopicNotFound(BrokerError, KeyError):
    def __str__(self) -> str:
        return f"topic not found: {self.args[0]}"


class PayloadTooLarge(BrokerError, ValueError):
    def __init__(self, size: int, limit: int) -> None:
        super().__init__(f"payload of {size} bytes exceeds limit of {limit}")
        self.size = size
        self.limit = limit


class UnknownHandle(BrokerError, KeyError):
    pass


class TopicName(str):
    """A validated topic name.

    Constructing one runs the checks, so holding a ``TopicName`` is proof
    that the name is 1-255 bytes of ``[A-Za-z0-9_.-]``.
    """

    __slots__ = ()

    def __new__(cls, raw: str) -> TopicName:
        if isinstance(raw, TopicName):
            return raw
        if not isinstance(raw, str):
            raise TypeError(f"topic name must be str, not {type(raw).__name__}")
        if not raw:
            raise ValidationError(TopicRule.EMPTY, raw)
        if len(raw.encode("utf-8")) > MAX_TOPIC_BYTES:
            raise ValidationError(TopicRule.TOO_LONG, raw)
        if _TOPIC_CHARSET.fullmatch(raw) is None:
            raise ValidationError(TopicRule.ILLEGAL_CHARACTER, raw)
        return super().__new__(cls, raw)

    @property
    def name(self) -> str:
        return str(self)

    def __repr__(self) -> str:
        return f"TopicName({str(self)!r})"


def validate_topic_name(raw: str) -> TopicName:
    """Return ``raw`` as a :class:`TopicName` or raise :class:`ValidationError`."""
    return TopicName(raw)


@dataclass(frozen=True)
class Message:
    topic: TopicName
    seq: int
    payload: bytes
    published_at: float


class Sink:
    """Bounded, ordered single-producer/single-consumer message channel.

    The broker is the producer.  A consumer either pulls with :meth:`get`
    (or iteration) or attaches a listener, in which case messages are handed
    over synchronously and the buffer never fills.  A full buffer blocks the
    producer rather than dropping, so delivery stays lossless and in order.
    """

    def __init__(self, capacity: int = DEFAULT_SINK_CAPACITY) -> None:
        if capacity < 1:
            raise ValueError("sink capacity must be positive")
        self.capacity = capacity
        self._items: deque[Message] = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._listener: Callable[[Message], None] | None = None
        self._on_close: Callable[[], None] | None = None

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self) -> int:
        return len(self._items)

    def attach(
        self,
        on_message: Callable[[Message], None],
        on_close: Callable[[], None] | None = None,
    ) -> None:
        """Switch to push delivery; anything already buffered is flushed first."""
        with self._cond:
            while self._items:
                on_message(self._items.popleft())
            self._listener = on_message
            self._on_close = on_close
            closed = self._closed
            self._cond.notify_all()
        if closed and on_close is not None:
            on_close()

    def put(self, message: Message, timeout: float | None = None) -> bool:
        """Enqueue ``message``; returns False if the sink is (or becomes) closed."""
        with self._cond:
            if self._closed:
                return False
            if self._listener is not None:
                self._listener(message)
                return True
            deadline = None if timeout is None else time.monotonic() + timeout
            while len(self._items) >= self.capacity and not self._closed:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError("sink full")
                self._cond.wait(remaining)
            if self._closed:
                return False
            if self._listener is not None:
                self._listener(message)
            else:
                self._items.append(message)
            self._cond.notify_all()
            return True

    def get(self, timeout: float | None = None) -> Message | None:
        """Next message, or None once the sink is closed and drained."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._closed, timeout):
                raise TimeoutError("no message")
            if self._items:
                message = self._items.popleft()
                self._cond.notify_all()
                return message
            return None

    def drain(self) -> list[Message]:
        with self._cond:
            items = list(self._items)
            self._items.clear()
            self._cond.notify_all()
            return items

    def close(self) -> None:
        with self._cond:
            if self._closed:
                return
            self._closed = True
            on_close = self._on_close
            self._cond.notify_all()
        if on_close is not None:
            on_close()

    def __iter__(self) -> Iterator[Message]:
        while (message := self.get()) is not None:
            yield message


@dataclass(eq=False)
class SubscriberHandle:
    id: int
    topic: TopicName
    sink: Sink

    def __hash__(self) -> int:
        return hash(self.id)


@dataclass(eq=False)
class _TopicRecord:
    retained: deque[Message]
    subscribers: dict[int, SubscriberHandle] = field(default_factory=dict)
    next_seq: int = 1
    # fan-out runs outside the registry lock; this ticket keeps it in seq order
    fanned_out: int = 0
    fanout: threading.Condition = field(default_factory=threading.Condition)


class Broker:
    """Topic registry plus publish fan-out.

    Every operation is linearizable: registry changes happen under one lock,
    and each publish takes its sequence number and subscriber snapshot at
    that linearization point.  Fan-out to subscriber sinks then happens
    without the registry lock so a slow consumer can never wedge
    ``unsubscribe`` or ``delete_topic``.
    """

    def __init__(
        self,
        *,
        retained_capacity: int = DEFAULT_RETAINED_CAPACITY,
        sink_capacity: int = DEFAULT_SINK_CAPACITY,
        max_message_size: int = DEFAULT_MAX_MESSAGE_SIZE,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        if retained_capacity < 0:
            raise ValueError("retained_capacity must be >= 0")
        self.retained_capacity = retained_capacity
        self.sink_capacity = sink_capacity
        self.max_message_size = max_message_size
        self.clock = clock
        self._lock = threading.Lock()
        self._topics: dict[TopicName, _TopicRecord] = {}
        self._handles: dict[int, SubscriberHandle] = {}
        self._ids = itertools.count(1)

    def create_topic(self, name: str) -> bool:
        """Create ``name``; returns False (and changes nothing) if it exists."""
        name = TopicName(name)
        with self._lock:
            if name in self._topics:
                return False
            self._topics[name] = _TopicRecord(retained=deque(maxlen=self.retained_capacity))
            return True

    def topic_exists(self, name: str) -> bool:
        with self._lock:
            return name in self._topics

    def delete_topic(self, name: str) -> None:
        """Remove the topic, discard retained data and close every subscriber sink."""
        with self._lock:
            record = self._topics.pop(name, None)
            if record is None:
                raise TopicNotFound(name)
            handles = list(record.subscribers.values())
            for handle in handles:
                del self._handles[handle.id]
            record.subscribers.clear()
            record.retained.clear()
        for handle in handles:
            handle.sink.close()

    def publish(self, name: str, payload: bytes) -> int:
        """Store ``payload`` and push it to current subscribers.

        Returns the number of sinks the message was enqueued on.
        """
        payload = bytes(payload)
        if len(payload) > self.max_message_size:
            raise PayloadTooLarge(len(payload), self.max_message_size)
        with self._lock:
            record = self._topics.get(name)
            if record is None:
                raise TopicNotFound(name)
            seq = record.next_seq
            record.next_seq += 1
            message = Message(TopicName(name), seq, payload, self.clock())
            record.retained.append(message)
            targets = list(record.subscribers.values())
        with record.fanout:
            record.fanout.wait_for(lambda: record.fanned_out == seq - 1)
            try:
                return sum(1 for handle in targets if handle.sink.put(message))
            finally:
                record.fanned_out = seq
                record.fanout.notify_all()

    def subscribe(self, name: str) -> SubscriberHandle:
        """Register a new subscriber; it sees only messages published from now on."""
        with self._lock:
            record = self._topics.get(name)
            if record is None:
                raise TopicNotFound(name)
            handle = SubscriberHandle(next(self._ids), TopicName(name), Sink(self.sink_capacity))
            record.subscribers[handle.id] = handle
            self._handles[handle.id] = handle
            return handle

    def unsubscribe(self, handle: SubscriberHandle) -> None:
        with self._lock:
            if self._handles.pop(handle.id, None) is None:
                raise UnknownHandle(handle.id)
            del self._topics[handle.topic].subscribers[handle.id]
        handle.sink.close()

    # -- inspection ---------------------------------------------------------

    def topics(self) -> list[TopicName]:
        with self._lock:
            return list(self._topics)

    def retained(self, name: str) -> list[Message]:
        with self._lock:
            record = self._topics.get(name)
            if record is None:
                raise TopicNotFound(name)
            return list(record.retained)

    def subscribers(self, name: str) -> list[SubscriberHandle]:
        with self._lock:
            record = self._topics.get(name)
            if record is None:
                raise TopicNotFound(name)
            return list(record.subscribers.values())

    def subscriber_count(self, name: str) -> int:
        return len(self.subscribers(name))
