"""QUIC variable-length integers (2-bit length prefix, 1/2/4/8 bytes)."""

from __future__ import annotations

MAX_QUIC_INT = (1 << 62) - 1


class Truncated(ValueError):
    pass


def encode_quic_int(value: int) -> bytes:
    if value < 0x40:
        return bytes((value,))
    if value < 0x4000:
        return (value | 0x4000).to_bytes(2, "big")
    if value < 0x4000_0000:
        return (value | 0x8000_0000).to_bytes(4, "big")
    if value <= MAX_QUIC_INT:
        return (value | 0xC000_0000_0000_0000).to_bytes(8, "big")
    raise ValueError(f"{value} does not fit a QUIC varint")


def quic_int_size(value: int) -> int:
    return 1 if value < 0x40 else 2 if value < 0x4000 else 4 if value < 0x4000_0000 else 8


def decode_quic_int(data: bytes, pos: int = 0) -> tuple[int, int]:
    """Returns ``(value, new_pos)``; raises :class:`Truncated` if ``data`` ends early."""
    if pos >= len(data):
        raise Truncated("varint past end of buffer")
    first = data[pos]
    size = 1 << (first >> 6)
    if pos + size > len(data):
        raise Truncated("varint past end of buffer")
    value = first & 0x3F
    for byte in data[pos + 1 : pos + size]:
        value = (value << 8) | byte
    return value, pos + size
