"""HTTP/3 client channel and broker application on the modeled transport."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ..core import Broker
from ..netlink.transport import ModeledConnection, TransportError
from .client import ResponseListener, StreamEndedAbnormally
from .routing import H3BrokerSession
from .wire import (
    FRAME_DATA,
    FRAME_HEADERS,
    STREAM_CONTROL,
    STREAM_QPACK_DECODER,
    STREAM_QPACK_ENCODER,
    FrameParser,
    H3ProtocolError,
    HeaderCodec,
    encode_frame,
    encode_settings,
    header_value,
    request_headers,
)

ALPN_H3 = "h3"

LABEL_HEADERS = "h3:HEADERS"
LABEL_DATA = "h3:DATA"
LABEL_SETTINGS = "h3:SETTINGS"


def _is_bidi(stream_id: int) -> bool:
    return stream_id & 0x2 == 0


def _open_control_streams(conn: ModeledConnection) -> None:
    conn.send_stream_data(
        conn.get_next_stream_id(unidirectional=True),
        bytes((STREAM_CONTROL,)) + encode_settings(),
        label=LABEL_SETTINGS,
    )
    for stream_type in (STREAM_QPACK_ENCODER, STREAM_QPACK_DECODER):
        conn.send_stream_data(conn.get_next_stream_id(unidirectional=True), bytes((stream_type,)))


class ModeledH3Channel:
    """Client side: turns SDK requests into HEADERS/DATA on request streams."""

    def __init__(self, conn: ModeledConnection, authority: str = "broker") -> None:
        self.conn = conn
        self.authority = authority
        conn.app = self
        self._codec = HeaderCodec()
        self._listeners: dict[int, ResponseListener] = {}
        self._parsers: dict[int, FrameParser] = {}
        self._queued: list[tuple[int, str, str, bytes | None]] = []
        self._ready = False

    # -- channel API ------------------------------------------------------------

    def open_request(self, method: str, path: str, body: bytes | None, listener: ResponseListener) -> int:
        if self.conn.state == "closed":
            raise TransportError("connection closed")
        stream_id = self.conn.get_next_stream_id()
        self._listeners[stream_id] = listener
        self._parsers[stream_id] = FrameParser()
        if self._ready:
            self._send_request(stream_id, method, path, body)
        else:
            self._queued.append((stream_id, method, path, body))
        return stream_id

    def cancel_request(self, stream_id: int) -> None:
        self._listeners.pop(stream_id, None)
        self.conn.stop_sending(stream_id)

    def close(self) -> None:
        self.conn.close()

    def _send_request(self, stream_id: int, method: str, path: str, body: bytes | None) -> None:
        headers = self._codec.encode(stream_id, request_headers(method, self.authority, path, body))
        self.conn.send_stream_data(stream_id, headers, end_stream=body is None, label=LABEL_HEADERS)
        if body is not None:
            self.conn.send_stream_data(stream_id, encode_frame(FRAME_DATA, body), end_stream=True, label=LABEL_DATA)

    # -- transport callbacks ------------------------------------------------------

    def handshake_completed(self) -> None:
        self._ready = True
        _open_control_streams(self.conn)
        queued, self._queued = self._queued, []
        for request in queued:
            self._send_request(*request)

    def stream_data_received(self, stream_id: int, data: bytes, fin: bool) -> None:
        listener = self._listeners.get(stream_id)
        if listener is None:
            return
        try:
            for frame_type, payload in self._parsers[stream_id].feed(data):
                if frame_type == FRAME_HEADERS:
                    status = header_value(self._codec.decode(stream_id, payload), b":status")
                    listener.response_headers(int(status or 0))
                elif frame_type == FRAME_DATA:
                    listener.response_data(payload)
        except (H3ProtocolError, ValueError) as exc:
            self._listeners.pop(stream_id, None)
            listener.request_failed(StreamEndedAbnormally(str(exc)))
            return
        if fin:
            self._listeners.pop(stream_id, None)
            self._parsers.pop(stream_id, None)
            listener.response_ended()

    def stream_reset(self, stream_id: int) -> None:
        listener = self._listeners.pop(stream_id, None)
        if listener is not None:
            listener.request_failed(StreamEndedAbnormally(f"stream {stream_id} reset by broker"))

    def connection_terminated(self, error: Exception | None) -> None:
        listeners, self._listeners = self._listeners, {}
        for listener in listeners.values():
            listener.request_failed(StreamEndedAbnormally(f"connection lost: {error or 'closed'}"))


@dataclass
class _PendingRequest:
    parser: FrameParser = field(default_factory=FrameParser)
    method: str | None = None
    path: str | None = None
    body: bytearray = field(default_factory=bytearray)


class ModeledH3BrokerApp:
    """Broker side: decodes requests and hands them to an :class:`H3BrokerSession`."""

    def __init__(self, conn: ModeledConnection, broker: Broker) -> None:
        self.conn = conn
        self.session = H3BrokerSession(broker, self)
        self._codec = HeaderCodec()
        self._requests: dict[int, _PendingRequest] = {}

    # ResponseWriter
    def send_headers(self, stream_id: int, headers: list[tuple[bytes, bytes]], end_stream: bool) -> None:
        if self.conn.state != "closed":
            self.conn.send_stream_data(stream_id, self._codec.encode(stream_id, headers), end_stream, label=LABEL_HEADERS)

    def send_data(self, stream_id: int, data: bytes, end_stream: bool) -> None:
        if self.conn.state == "closed":
            return
        if data:
            self.conn.send_stream_data(stream_id, encode_frame(FRAME_DATA, data), end_stream, label=LABEL_DATA)
        else:
            self.conn.send_stream_data(stream_id, b"", end_stream)

    # TransportApp
    def handshake_completed(self) -> None:
        _open_control_streams(self.conn)

    def stream_data_received(self, stream_id: int, data: bytes, fin: bool) -> None:
        if not _is_bidi(stream_id):
            return
        request = self._requests.setdefault(stream_id, _PendingRequest())
        try:
            for frame_type, payload in request.parser.feed(data):
                if frame_type == FRAME_HEADERS:
                    headers = self._codec.decode(stream_id, payload)
                    request.method = (header_value(headers, b":method") or b"").decode()
                    request.path = (header_value(headers, b":path") or b"").decode()
                elif frame_type == FRAME_DATA:
                    request.body += payload
        except H3ProtocolError:
            self._requests.pop(stream_id, None)
            self.conn.reset_stream(stream_id)
            return
        if fin:
            self._requests.pop(stream_id, None)
            if request.method is None:
                self.conn.reset_stream(stream_id)
                return
            self.session.handle_request(stream_id, request.method, request.path or "", bytes(request.body))

    def stream_reset(self, stream_id: int) -> None:
        self._requests.pop(stream_id, None)
        self.session.cancel_stream(stream_id)

    def connection_terminated(self, error: Exception | None) -> None:
        self._requests.clear()
        self.session.connection_lost()
