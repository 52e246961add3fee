"""Codec for the MQTT 5 control packets this baseline exchanges.

Only seven variants are supported, and only in the exact shape this module
emits: no properties other than Authentication Method on CONNECT, QoS 0
PUBLISH, a single topic filter per SUBSCRIBE.  The decoder is strict, so
any byte string it accepts re-encodes to the identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

from .varint import IncompleteVarInt, MalformedVarInt, MAX_VARINT, decode_varint, encode_varint

PROTOCOL_NAME = "MQTT"
PROTOCOL_LEVEL = 5

CONNECT = 1
CONNACK = 2
PUBLISH = 3
SUBSCRIBE = 8
SUBACK = 9
DISCONNECT = 14
AUTH = 15

# reason codes used by the broker and client
SUCCESS = 0x00
UNSPECIFIED_ERROR = 0x80
MALFORMED_PACKET = 0x81
PROTOCOL_ERROR = 0x82
BAD_USERNAME_OR_PASSWORD = 0x86
NOT_AUTHORIZED = 0x87
BAD_AUTHENTICATION_METHOD = 0x8C
TOPIC_FILTER_INVALID = 0x8F
PACKET_TOO_LARGE = 0x95

_PROP_AUTH_METHOD = 0x15

_FLAG_USERNAME = 0x80
_FLAG_PASSWORD = 0x40
_FLAG_CLEAN_START = 0x02

_U16 = struct.Struct(">H")


class MqttCodecError(ValueError):
    pass


class MalformedPacket(MqttCodecError):
    pass


class IncompletePacket(MqttCodecError):
    """More bytes are needed before the packet can be decoded."""


@dataclass(frozen=True)
class Connect:
    client_id: str
    username: str | None = None
    password: bytes | None = None
    auth_method: str | None = None
    keep_alive: int = 60
    clean_start: bool = True

    @property
    def auth_gated(self) -> bool:
        return self.auth_method is not None or self.username is not None or self.password is not None


@dataclass(frozen=True)
class ConnAck:
    reason_code: int = SUCCESS
    session_present: bool = False


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    topic: str


@dataclass(frozen=True)
class SubAck:
    packet_id: int
    reason_code: int = SUCCESS


@dataclass(frozen=True)
class Disconnect:
    reason_code: int = SUCCESS


@dataclass(frozen=True)
class Auth:
    reason_code: int = SUCCESS


MqttPacket = Union[Connect, ConnAck, Publish, Subscribe, SubAck, Disconnect, Auth]

PACKET_TYPES: dict[type, int] = {
    Connect: CONNECT,
    ConnAck: CONNACK,
    Publish: PUBLISH,
    Subscribe: SUBSCRIBE,
    SubAck: SUBACK,
    Disconnect: DISCONNECT,
    Auth: AUTH,
}
# fixed-header flag nibble required for each packet type
_FLAGS = {CONNECT: 0, CONNACK: 0, PUBLISH: 0, SUBSCRIBE: 2, SUBACK: 0, DISCONNECT: 0, AUTH: 0}


def packet_name(packet: MqttPacket) -> str:
    return type(packet).__name__.upper()


# -- encoding ---------------------------------------------------------------


def _string(value: str) -> bytes:
    if "\x00" in value:
        raise ValueError("MQTT strings may not contain U+0000")
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string longer than 65535 bytes")
    return _U16.pack(len(raw)) + raw


def _binary(value: bytes) -> bytes:
    if len(value) > 0xFFFF:
        raise ValueError("binary field longer than 65535 bytes")
    return _U16.pack(len(value)) + value


def _u8(value: int) -> bytes:
    if not 0 <= value <= 0xFF:
        raise ValueError(f"byte value {value} out of range")
    return bytes((value,))


def _packet_id(value: int) -> bytes:
    if not 1 <= value <= 0xFFFF:
        raise ValueError(f"packet identifier {value} out of range")
    return _U16.pack(value)


_NO_PROPERTIES = b"\x00"


def _encode_body(packet: MqttPacket) -> bytes:
    if isinstance(packet, Connect):
        flags = _FLAG_CLEAN_START if packet.clean_start else 0
        if packet.username is not None:
            flags |= _FLAG_USERNAME
        if packet.password is not None:
            flags |= _FLAG_PASSWORD
        if not 0 <= packet.keep_alive <= 0xFFFF:
            raise ValueError("keep_alive out of range")
        props = b""
        if packet.auth_method is not None:
            props = bytes((_PROP_AUTH_METHOD,)) + _string(packet.auth_method)
        body = [
            _string(PROTOCOL_NAME),
            bytes((PROTOCOL_LEVEL, flags)),
            _U16.pack(packet.keep_alive),
            encode_varint(len(props)),
            props,
            _string(packet.client_id),
        ]
        if packet.username is not None:
            body.append(_string(packet.username))
        if packet.password is not None:
            body.append(_binary(packet.password))
        return b"".join(body)
    if isinstance(packet, ConnAck):
        return bytes((1 if packet.session_present else 0,)) + _u8(packet.reason_code) + _NO_PROPERTIES
    if isinstance(packet, Publish):
        if not packet.topic:
            raise ValueError("PUBLISH topic may not be empty")
        return _string(packet.topic) + _NO_PROPERTIES + bytes(packet.payload)
    if isinstance(packet, Subscribe):
        return _packet_id(packet.packet_id) + _NO_PROPERTIES + _string(packet.topic) + b"\x00"
    if isinstance(packet, SubAck):
        return _packet_id(packet.packet_id) + _NO_PROPERTIES + _u8(packet.reason_code)
    if isinstance(packet, (Disconnect, Auth)):
        return _u8(packet.reason_code) + _NO_PROPERTIES
    raise TypeError(f"not an MQTT packet: {packet!r}")


def encode_packet(packet: MqttPacket) -> bytes:
    body = _encode_body(packet)
    if len(body) > MAX_VARINT:
        raise ValueError("packet body exceeds maximum remaining length")
    kind = PACKET_TYPES[type(packet)]
    return bytes(((kind << 4) | _FLAGS[kind],)) + encode_varint(len(body)) + body


# -- decoding ---------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, pos: int, end: int) -> None:
        self.data = data
        self.pos = pos
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MalformedPacket("field runs past remaining length")
        chunk = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def varint(self) -> int:
        try:
            value, used = decode_varint(self.data[: self.end], self.pos)
        except (IncompleteVarInt, MalformedVarInt) as exc:
            raise MalformedPacket(str(exc)) from exc
        self.pos += used
        return value

    def string(self) -> str:
        raw = self.take(self.u16())
        try:
            value = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPacket("invalid UTF-8 string") from exc
        if "\x00" in value:
            raise MalformedPacket("string contains U+0000")
        return value

    def binary(self) -> bytes:
        return self.take(self.u16())

    def packet_id(self) -> int:
        value = self.u16()
        if value == 0:
            raise MalformedPacket("packet identifier 0")
        return value

    def no_properties(self) -> None:
        if self.varint() != 0:
            raise MalformedPacket("unsupported properties")

    def rest(self) -> bytes:
        return self.take(self.end - self.pos)

    def finish(self) -> None:
        if self.pos != self.end:
            raise MalformedPacket("trailing bytes after packet body")


def _decode_connect(r: _Reader) -> Connect:
    if r.string() != PROTOCOL_NAME or r.u8() != PROTOCOL_LEVEL:
        raise MalformedPacket("not an MQTT 5 CONNECT")
    flags = r.u8()
    if flags & ~(_FLAG_USERNAME | _FLAG_PASSWORD | _FLAG_CLEAN_START):
        raise MalformedPacket(f"unsupported connect flags {flags:#04x}")
    keep_alive = r.u16()
    props_len = r.varint()
    props_end = r.pos + props_len
    if props_end > r.end:
        raise MalformedPacket("properties run past remaining length")
    auth_method = None
    if props_len:
        if r.u8() != _PROP_AUTH_METHOD:
            raise MalformedPacket("unsupported CONNECT property")
        auth_method = r.string()
        if r.pos != props_end:
            raise MalformedPacket("properties length mismatch")
    client_id = r.string()
    username = r.string() if flags & _FLAG_USERNAME else None
    password = r.binary() if flags & _FLAG_PASSWORD else None
    return Connect(
        client_id,
        username=username,
        password=password,
        auth_method=auth_method,
        keep_alive=keep_alive,
        clean_start=bool(flags & _FLAG_CLEAN_START),
    )


def _decode_body(kind: int, r: _Reader) -> MqttPacket:
    if kind == CONNECT:
        return _decode_connect(r)
    if kind == CONNACK:
        ack_flags = r.u8()
        if ack_flags > 1:
            raise MalformedPacket("reserved CONNACK flags set")
        reason = r.u8()
        r.no_properties()
        return ConnAck(reason, session_present=bool(ack_flags))
    if kind == PUBLISH:
        topic = r.string()
        if not topic:
            raise MalformedPacket("empty PUBLISH topic")
        r.no_properties()
        return Publish(topic, r.rest())
    if kind == SUBSCRIBE:
        packet_id = r.packet_id()
        r.no_properties()
        topic = r.string()
        if r.u8() != 0:
            raise MalformedPacket("unsupported subscription options")
        return Subscribe(packet_id, topic)
    if kind == SUBACK:
        packet_id = r.packet_id()
        r.no_properties()
        return SubAck(packet_id, r.u8())
    reason = r.u8()
    r.no_properties()
    return Disconnect(reason) if kind == DISCONNECT else Auth(reason)


def decode_packet(data: bytes) -> tuple[MqttPacket, int]:
    """Decode one packet from the front of ``data``.

    Returns ``(packet, consumed)``.  Raises :class:`IncompletePacket` when
    ``data`` holds only a prefix of a packet and :class:`MalformedPacket`
    for anything else that is not a canonical encoding.
    """
    if not data:
        raise IncompletePacket("empty buffer")
    kind, flags = data[0] >> 4, data[0] & 0x0F
    if kind not in _FLAGS:
        raise MalformedPacket(f"unsupported packet type {kind}")
    if flags != _FLAGS[kind]:
        raise MalformedPacket(f"bad flags {flags:#x} for packet type {kind}")
    try:
        length, used = decode_varint(data, 1)
    except IncompleteVarInt as exc:
        raise IncompletePacket(str(exc)) from exc
    except MalformedVarInt as exc:
        raise MalformedPacket(str(exc)) from exc
    start = 1 + used
    end = start + length
    if len(data) < end:
        raise IncompletePacket(f"need {end} bytes, have {len(data)}")
    reader = _Reader(data, start, end)
    packet = _decode_body(kind, reader)
    reader.finish()
    return packet, end


class PacketStream:
    """Reassembles packets from a byte stream delivered in arbitrary chunks."""

    def __init__(self) -> None:
        self._buffer = bytearray()

    def feed(self, data: bytes) -> list[MqttPacket]:
        self._buffer += data
        packets = []
        while self._buffer:
            try:
                packet, used = decode_packet(self._buffer)
            except IncompletePacket:
                break
            del self._buffer[:used]
            packets.append(packet)
        return packets

    @property
    def pending(self) -> int:
        return len(self._buffer)
