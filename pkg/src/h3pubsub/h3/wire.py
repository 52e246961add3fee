"""Minimal HTTP/3 framing for the modeled transport.

Header blocks are QPACK-encoded with a zero-capacity dynamic table, so only
static-table references and literals ever appear on the wire.
"""

from __future__ import annotations

import pylsqpack

from ..quicint import Truncated, decode_quic_int, encode_quic_int

FRAME_DATA = 0x0
FRAME_HEADERS = 0x1
FRAME_SETTINGS = 0x4

STREAM_CONTROL = 0x00
STREAM_QPACK_ENCODER = 0x02
STREAM_QPACK_DECODER = 0x03

SETTING_QPACK_MAX_TABLE_CAPACITY = 0x1
SETTING_QPACK_BLOCKED_STREAMS = 0x7

Headers = list[tuple[bytes, bytes]]


class H3ProtocolError(ValueError):
    pass


def encode_frame(frame_type: int, payload: bytes) -> bytes:
    return encode_quic_int(frame_type) + encode_quic_int(len(payload)) + payload


def encode_settings() -> bytes:
    body = b"".join(
        encode_quic_int(key) + encode_quic_int(0)
        for key in (SETTING_QPACK_MAX_TABLE_CAPACITY, SETTING_QPACK_BLOCKED_STREAMS)
    )
    return encode_frame(FRAME_SETTINGS, body)


class FrameParser:
    """Incremental HTTP/3 frame splitter for one stream."""

    def __init__(self) -> None:
        self._buffer = b""

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self._buffer += data
        frames = []
        pos = 0
        while True:
            try:
                frame_type, p = decode_quic_int(self._buffer, pos)
                length, p = decode_quic_int(self._buffer, p)
            except Truncated:
                break
            if p + length > len(self._buffer):
                break
            frames.append((frame_type, self._buffer[p : p + length]))
            pos = p + length
        self._buffer = self._buffer[pos:]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buffer)


class HeaderCodec:
    """Per-connection QPACK state restricted to the static table and literals."""

    def __init__(self) -> None:
        self._encoder = pylsqpack.Encoder()
        self._decoder = pylsqpack.Decoder(0, 0)

    def encode(self, stream_id: int, headers: Headers) -> bytes:
        encoder_stream, block = self._encoder.encode(stream_id, headers)
        if encoder_stream:
            raise H3ProtocolError("QPACK encoder tried to use the dynamic table")
        return encode_frame(FRAME_HEADERS, block)

    def decode(self, stream_id: int, block: bytes) -> Headers:
        try:
            _, headers = self._decoder.feed_header(stream_id, block)
        except (pylsqpack.DecompressionFailed, pylsqpack.StreamBlocked) as exc:
            raise H3ProtocolError(f"cannot decode header block: {exc}") from exc
        return headers


def request_headers(method: str, authority: str, path: str, body: bytes | None) -> Headers:
    headers = [
        (b":method", method.encode()),
        (b":scheme", b"https"),
        (b":authority", authority.encode()),
        (b":path", path.encode()),
    ]
    if body is not None:
        headers.append((b"content-type", b"application/octet-stream"))
        headers.append((b"content-length", str(len(body)).encode()))
    return headers


def header_value(headers: Headers, name: bytes) -> bytes | None:
    for key, value in headers:
        if key == name:
            return value
    return None
