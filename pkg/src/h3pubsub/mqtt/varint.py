"""MQTT 5 Variable Byte Integer."""

from __future__ import annotations

MAX_VARINT = 268_435_455


class MalformedVarInt(ValueError):
    pass


class IncompleteVarInt(ValueError):
    """The buffer ended before the final (continuation-clear) byte."""


def encode_varint(value: int) -> bytes:
    if not 0 <= value <= MAX_VARINT:
        raise ValueError(f"{value} outside 0..{MAX_VARINT}")
    out = bytearray()
    while True:
        value, digit = divmod(value, 128)
        if value:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode at ``offset``; returns ``(value, consumed)``.

    Rejects encodings longer than four bytes and non-minimal encodings
    (a trailing zero group after the first byte).
    """
    value = 0
    for i in range(4):
        if offset + i >= len(data):
            raise IncompleteVarInt("truncated variable byte integer")
        byte = data[offset + i]
        value |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            if i and byte == 0:
                raise MalformedVarInt("non-minimal variable byte integer")
            return value, i + 1
    raise MalformedVarInt("variable byte integer longer than 4 bytes")
