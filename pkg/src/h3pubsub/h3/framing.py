"""Length-prefixed event frames carried on a subscription response body.

Each frame is a 4-byte big-endian payload length followed by the payload.
Frames are concatenated with no padding, so a rate-limited body can be
decoded incrementally as bytes trickle in.
"""

from __future__ import annotations

import struct

from ..core import DEFAULT_MAX_MESSAGE_SIZE, Message

_LENGTH = struct.Struct(">I")
HEADER_SIZE = _LENGTH.size


def encode_event_frame(
    message: Message | bytes, max_message_size: int = DEFAULT_MAX_MESSAGE_SIZE
) -> bytes:
    payload = message.payload if isinstance(message, Message) else bytes(message)
    if len(payload) > max_message_size:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {max_message_size}")
    return _LENGTH.pack(len(payload)) + payload


def decode_event_frames(data: bytes) -> tuple[list[bytes], bytes]:
    """Split ``data`` into complete payloads and the unconsumed suffix.

    Never raises on truncation: a partial frame is returned as the remainder
    so the caller can prepend it to the next chunk.
    """
    payloads: list[bytes] = []
    view = memoryview(data)
    offset = 0
    while len(view) - offset >= HEADER_SIZE:
        (length,) = _LENGTH.unpack_from(view, offset)
        end = offset + HEADER_SIZE + length
        if end > len(view):
            break
        payloads.append(bytes(view[offset + HEADER_SIZE : end]))
        offset = end
    return payloads, bytes(view[offset:])


class EventFrameDecoder:
    """Incremental wrapper around :func:`decode_event_frames`."""

    def __init__(self) -> None:
        self._buffer = b""

    def feed(self, data: bytes) -> list[bytes]:
        payloads, self._buffer = decode_event_frames(self._buffer + data)
        return payloads

    @property
    def pending(self) -> int:
        return len(self._buffer)
