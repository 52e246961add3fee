"""A modeled QUIC-like transport for virtual-time runs.

Real QUIC stacks read the wall clock and spend most of their CPU on
cryptography, which makes them unusable under a virtual clock.  This model
keeps what matters for timing and byte accounting and drops the rest:

* 1-RTT handshake: a padded Client Hello, answered by a multi-datagram
  server flight; the client may send application data as soon as the
  flight is complete.  The Client Hello is retransmitted on a doubling
  timer (1 s initially) until the flight arrives.
* Streams with offsets, FIN, STOP_SENDING and RESET_STREAM.
* ACKs every second ack-eliciting packet or after ``max_ack_delay``;
  packet- and time-threshold loss detection and a probe timeout, following
  the usual QUIC recovery rules.
* No encryption (a 16-byte zero tag stands in for the AEAD expansion), no
  congestion control and no flow control: the link shaper is the only
  bottleneck.

Packets are real bytes with QUIC-shaped headers and frames so that every
datagram on the trace has a plausible size.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol, Union

from ..quicint import Truncated, decode_quic_int, encode_quic_int, quic_int_size
from .link import LinkEndpoint

logger = logging.getLogger(__name__)

INITIAL = 0xC0
HANDSHAKE = 0xE0
ONE_RTT = 0x40

F_PADDING = 0x00
F_PING = 0x01
F_ACK = 0x02
F_RESET_STREAM = 0x04
F_STOP_SENDING = 0x05
F_CRYPTO = 0x06
F_STREAM = 0x08
F_CONNECTION_CLOSE = 0x1C
F_HANDSHAKE_DONE = 0x1E

_STREAM_OFF = 0x04
_STREAM_LEN = 0x02
_STREAM_FIN = 0x01

_HEADER = struct.Struct(">B8sI")
AEAD_TAG = 16
PACKET_OVERHEAD = _HEADER.size + AEAD_TAG
_TIME_SLACK = 1e-9

LABEL_CLIENT_HELLO = "quic:client_hello"
LABEL_SERVER_FLIGHT = "quic:server_flight"
LABEL_FINISHED = "quic:finished"
LABEL_ACK = "quic:ack"
LABEL_CLOSE = "quic:close"


class TransportError(ConnectionError):
    pass


@dataclass(frozen=True)
class TransportConfig:
    handshake_timeout: float = 1.0
    max_handshake_retries: int = 8
    client_hello_size: int = 1200
    client_hello_crypto: int = 280
    server_flight: tuple[int, ...] = (1200, 1200, 1000)
    finished_size: int = 52
    max_datagram_size: int = 1200
    max_ack_delay: float = 0.025
    ack_every: int = 2
    initial_rtt: float = 0.333
    packet_threshold: int = 3
    time_threshold: float = 9 / 8


# -- frames -------------------------------------------------------------------


@dataclass
class StreamChunk:
    stream_id: int
    offset: int
    data: bytes
    fin: bool
    labels: tuple[str, ...] = ()

    def encode(self) -> bytes:
        kind = F_STREAM | _STREAM_OFF | _STREAM_LEN | (_STREAM_FIN if self.fin else 0)
        return (
            bytes((kind,))
            + encode_quic_int(self.stream_id)
            + encode_quic_int(self.offset)
            + encode_quic_int(len(self.data))
            + self.data
        )

    @staticmethod
    def header_size(stream_id: int, offset: int, length: int) -> int:
        return 1 + quic_int_size(stream_id) + quic_int_size(offset) + quic_int_size(length)


@dataclass
class ControlFrame:
    kind: int
    stream_id: int = 0
    code: int = 0
    final_size: int = 0
    reason: bytes = b""

    labels: tuple[str, ...] = ()

    def encode(self) -> bytes:
        out = bytes((self.kind,))
        if self.kind == F_STOP_SENDING:
            return out + encode_quic_int(self.stream_id) + encode_quic_int(self.code)
        if self.kind == F_RESET_STREAM:
            return (
                out + encode_quic_int(self.stream_id) + encode_quic_int(self.code)
                + encode_quic_int(self.final_size)
            )
        if self.kind == F_CONNECTION_CLOSE:
            return (
                out + encode_quic_int(self.code) + encode_quic_int(0)
                + encode_quic_int(len(self.reason)) + self.reason
            )
        return out


@dataclass
class CryptoFrame:
    offset: int
    data: bytes
    labels: tuple[str, ...] = ()

    def encode(self) -> bytes:
        return bytes((F_CRYPTO,)) + encode_quic_int(self.offset) + encode_quic_int(len(self.data)) + self.data


@dataclass
class AckFrame:
    ranges: list[tuple[int, int]]  # inclusive, descending

    def encode(self) -> bytes:
        largest, smallest = self.ranges[0]
        out = [bytes((F_ACK,)), encode_quic_int(largest), encode_quic_int(0),
               encode_quic_int(len(self.ranges) - 1), encode_quic_int(largest - smallest)]
        previous_smallest = smallest
        for hi, lo in self.ranges[1:]:
            out.append(encode_quic_int(previous_smallest - hi - 2))
            out.append(encode_quic_int(hi - lo))
            previous_smallest = lo
        return b"".join(out)


Frame = Union[StreamChunk, ControlFrame, CryptoFrame, AckFrame]


class MalformedDatagram(ValueError):
    pass


def parse_frames(payload: bytes) -> list[Frame]:
    frames: list[Frame] = []
    pos = 0
    try:
        while pos < len(payload):
            kind = payload[pos]
            pos += 1
            if kind == F_PADDING:
                continue
            if kind in (F_PING, F_HANDSHAKE_DONE):
                frames.append(ControlFrame(kind))
            elif kind == F_ACK:
                largest, pos = decode_quic_int(payload, pos)
                _, pos = decode_quic_int(payload, pos)
                count, pos = decode_quic_int(payload, pos)
                first, pos = decode_quic_int(payload, pos)
                ranges = [(largest, largest - first)]
                smallest = largest - first
                for _ in range(count):
                    gap, pos = decode_quic_int(payload, pos)
                    length, pos = decode_quic_int(payload, pos)
                    hi = smallest - gap - 2
                    smallest = hi - length
                    ranges.append((hi, smallest))
                frames.append(AckFrame(ranges))
            elif kind == F_RESET_STREAM:
                sid, pos = decode_quic_int(payload, pos)
                code, pos = decode_quic_int(payload, pos)
                final, pos = decode_quic_int(payload, pos)
                frames.append(ControlFrame(kind, sid, code, final))
            elif kind == F_STOP_SENDING:
                sid, pos = decode_quic_int(payload, pos)
                code, pos = decode_quic_int(payload, pos)
                frames.append(ControlFrame(kind, sid, code))
            elif kind == F_CRYPTO:
                offset, pos = decode_quic_int(payload, pos)
                length, pos = decode_quic_int(payload, pos)
                frames.append(CryptoFrame(offset, bytes(payload[pos : pos + length])))
                pos += length
            elif kind & 0xF8 == F_STREAM:
                sid, pos = decode_quic_int(payload, pos)
                offset, pos = decode_quic_int(payload, pos) if kind & _STREAM_OFF else (0, pos)
                if kind & _STREAM_LEN:
                    length, pos = decode_quic_int(payload, pos)
                else:
                    length = len(payload) - pos
                frames.append(StreamChunk(sid, offset, bytes(payload[pos : pos + length]), bool(kind & _STREAM_FIN)))
                pos += length
            elif kind == F_CONNECTION_CLOSE:
                code, pos = decode_quic_int(payload, pos)
                _, pos = decode_quic_int(payload, pos)
                length, pos = decode_quic_int(payload, pos)
                frames.append(ControlFrame(kind, code=code, reason=bytes(payload[pos : pos + length])))
                pos += length
            else:
                raise MalformedDatagram(f"unknown frame type {kind:#x}")
    except Truncated as exc:
        raise MalformedDatagram(str(exc)) from exc
    if pos > len(payload):
        raise MalformedDatagram("frame runs past end of packet")
    return frames


def connection_id(flow: str) -> bytes:
    return hashlib.blake2b(flow.encode(), digest_size=8).digest()


def build_packet(kind: int, cid: bytes, pn: int, frames: list[bytes], pad_to: int = 0) -> bytes:
    body = b"".join(frames)
    size = PACKET_OVERHEAD + len(body)
    if pad_to > size:
        body += bytes(pad_to - size)
    return _HEADER.pack(kind, cid, pn & 0xFFFFFFFF) + body + bytes(AEAD_TAG)


def split_packet(datagram: bytes) -> tuple[int, bytes, int, bytes]:
    if len(datagram) < PACKET_OVERHEAD:
        raise MalformedDatagram("datagram shorter than packet overhead")
    kind, cid, pn = _HEADER.unpack_from(datagram)
    return kind, cid, pn, datagram[_HEADER.size : -AEAD_TAG]


# -- connection -----------------------------------------------------------------


class TransportApp(Protocol):
    """What a protocol layer implements to ride on a :class:`ModeledConnection`."""

    def handshake_completed(self) -> None: ...

    def stream_data_received(self, stream_id: int, data: bytes, fin: bool) -> None: ...

    def stream_reset(self, stream_id: int) -> None: ...

    def connection_terminated(self, error: Exception | None) -> None: ...


@dataclass
class _SentPacket:
    pn: int
    time: float
    frames: list[Frame]
    size: int


@dataclass
class _RecvStream:
    next_offset: int = 0
    fin_offset: int | None = None
    chunks: dict[int, bytes] = field(default_factory=dict)
    finished: bool = False


@dataclass
class TransportStats:
    client_hello_sent: int = 0
    packets_sent: int = 0
    packets_received: int = 0
    retransmitted_frames: int = 0
    probe_timeouts: int = 0


class ModeledConnection:
    """One end of a modeled QUIC connection bound to a :class:`LinkEndpoint`."""

    def __init__(
        self,
        endpoint: LinkEndpoint,
        *,
        is_client: bool,
        flow: str,
        alpn: str,
        config: TransportConfig | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.loop = endpoint.loop
        self.is_client = is_client
        self.flow = flow
        self.alpn = alpn
        self.config = config or TransportConfig()
        self.cid = connection_id(flow)
        self.app: TransportApp | None = None
        self.stats = TransportStats()

        self.state = "idle"
        self.handshake_complete: asyncio.Future[None] = self.loop.create_future()
        self.closed: asyncio.Future[Exception | None] = self.loop.create_future()
        self.first_hello_at: float | None = None
        self._last_hello_at = 0.0
        self.handshake_completed_at: float | None = None

        self._next_pn = 0
        self._next_bidi = 0 if is_client else 1
        self._next_uni = 2 if is_client else 3
        self._send_offsets: dict[int, int] = {}
        self._send_closed: set[int] = set()
        self._queue: deque[Frame] = deque()
        self._sent: dict[int, _SentPacket] = {}
        self._recv: dict[int, _RecvStream] = {}
        self._received_pns: set[int] = set()
        self._ack_pending = False
        self._unacked_eliciting = 0
        self._ack_timer: asyncio.TimerHandle | None = None
        self._flush_scheduled = False
        self._crypto_rx: dict[int, bytes] = {}
        self._finished_pending = False
        self._hs_timer: asyncio.TimerHandle | None = None
        self._hs_timeout = self.config.handshake_timeout
        self._hs_retries = 0
        self._server_confirmed = False
        self._flight_sent_at: float | None = None
        self._reset_sent: set[int] = set()

        self.srtt: float | None = None
        self.rttvar = self.config.initial_rtt / 2
        self.latest_rtt = 0.0
        self._largest_acked = -1
        self._last_eliciting_sent = 0.0
        self._pto_count = 0
        self._loss_time: float | None = None
        self._recovery_timer: asyncio.TimerHandle | None = None
        self._idle_waiters: list[asyncio.Future[None]] = []

    # -- public API -------------------------------------------------------------

    def connect(self) -> None:
        if not self.is_client or self.state != "idle":
            raise TransportError("connect() is for idle client connections")
        self.state = "handshake"
        self.first_hello_at = self.loop.time()
        self._send_client_hello()

    def get_next_stream_id(self, unidirectional: bool = False) -> int:
        if unidirectional:
            sid, self._next_uni = self._next_uni, self._next_uni + 4
        else:
            sid, self._next_bidi = self._next_bidi, self._next_bidi + 4
        return sid

    def send_stream_data(self, stream_id: int, data: bytes, end_stream: bool = False, label: str | None = None) -> None:
        if self.state == "closed":
            raise TransportError("connection closed")
        if stream_id in self._send_closed:
            raise TransportError(f"stream {stream_id} already finished")
        offset = self._send_offsets.get(stream_id, 0)
        self._send_offsets[stream_id] = offset + len(data)
        if end_stream:
            self._send_closed.add(stream_id)
        labels = (label,) if label else ()
        self._queue.append(StreamChunk(stream_id, offset, bytes(data), end_stream, labels))
        self._schedule_flush()

    def stop_sending(self, stream_id: int, code: int = 0) -> None:
        """Ask the peer to abandon its side of ``stream_id``."""
        if self.state == "closed":
            return
        self._queue.append(ControlFrame(F_STOP_SENDING, stream_id, code))
        self._schedule_flush()

    def reset_stream(self, stream_id: int, code: int = 0) -> None:
        if self.state == "closed":
            return
        self._send_closed.add(stream_id)
        self._reset_sent.add(stream_id)
        self._queue = deque(f for f in self._queue if not (isinstance(f, StreamChunk) and f.stream_id == stream_id))
        self._queue.append(ControlFrame(F_RESET_STREAM, stream_id, code, self._send_offsets.get(stream_id, 0)))
        self._schedule_flush()

    def close(self, code: int = 0, reason: str = "") -> None:
        if self.state == "closed":
            return
        if self.state == "established":
            if self._queue:
                self._flush()
            frames = []
            if self._ack_pending and self._received_pns:
                frames.append(self._ack_frame().encode())
            frames.append(ControlFrame(F_CONNECTION_CLOSE, code=code, reason=reason.encode()).encode())
            self._transmit(build_packet(ONE_RTT, self.cid, self._take_pn(), frames), (LABEL_CLOSE,))
        self._terminate(None if code == 0 else TransportError(f"closed locally with code {code}"))

    async def wait_acked(self) -> None:
        """Wait until every byte handed to the transport has been acknowledged."""
        if self._is_idle():
            return
        waiter = self.loop.create_future()
        self._idle_waiters.append(waiter)
        await waiter

    # -- sending ------------------------------------------------------------------

    def _take_pn(self) -> int:
        pn = self._next_pn
        self._next_pn += 1
        return pn

    def _transmit(self, datagram: bytes, labels: tuple[str, ...]) -> None:
        self.stats.packets_sent += 1
        if self.is_client:
            self.endpoint.send_datagram(datagram, labels=labels)
        else:
            self.endpoint.send_datagram(datagram, to=self.flow, labels=labels)

    def _send_client_hello(self) -> None:
        alpn = self.alpn.encode()
        hello = b"CHLO" + encode_quic_int(len(alpn)) + alpn
        hello += bytes(max(0, self.config.client_hello_crypto - len(hello)))
        packet = build_packet(
            INITIAL, self.cid, self._take_pn(), [CryptoFrame(0, hello).encode()], pad_to=self.config.client_hello_size
        )
        self.stats.client_hello_sent += 1
        self._last_hello_at = self.loop.time()
        self._transmit(packet, (LABEL_CLIENT_HELLO,))
        self._hs_timer = self.loop.call_later(self._hs_timeout, self._handshake_timeout)

    def _handshake_timeout(self) -> None:
        self._hs_timer = None
        if self.state != "handshake":
            return
        self._hs_retries += 1
        if self._hs_retries > self.config.max_handshake_retries:
            self._terminate(TransportError("handshake timed out"))
            return
        self._hs_timeout *= 2
        self._send_client_hello()

    def _send_server_flight(self) -> None:
        sizes = self.config.server_flight
        # the crypto stream starts with its own total length so the client knows when it has it all
        capacities = []
        offset = 0
        for size in sizes:
            room = size - PACKET_OVERHEAD - 1 - quic_int_size(offset) - 2
            capacities.append(room)
            offset += room
        total = offset
        if self._flight_sent_at is None:
            self._flight_sent_at = self.loop.time()
        stream = total.to_bytes(4, "big") + b"SHLO" + bytes(total - 8)
        offset = 0
        for size, room in zip(sizes, capacities):
            frame = CryptoFrame(offset, stream[offset : offset + room]).encode()
            self._transmit(build_packet(HANDSHAKE, self.cid, self._take_pn(), [frame], pad_to=size), (LABEL_SERVER_FLIGHT,))
            offset += room

    def _schedule_flush(self) -> None:
        if not self._flush_scheduled:
            self._flush_scheduled = True
            self.loop.call_soon(self._flush)

    def _flush(self) -> None:
        self._flush_scheduled = False
        if self.state != "established":
            return
        room_max = self.config.max_datagram_size - PACKET_OVERHEAD
        now = self.loop.time()
        while self._queue or self._ack_pending or self._finished_pending:
            encoded: list[bytes] = []
            frames: list[Frame] = []
            labels: dict[str, None] = {}
            room = room_max
            if self._ack_pending and self._received_pns:
                ack = self._ack_frame().encode()
                encoded.append(ack)
                room -= len(ack)
                self._clear_ack()
            self._ack_pending = False
            if self._finished_pending:
                fin = CryptoFrame(0, bytes(self.config.finished_size)).encode()
                encoded.append(fin)
                room -= len(fin)
                labels[LABEL_FINISHED] = None
                self._finished_pending = False
            while self._queue:
                frame = self._queue[0]
                if isinstance(frame, StreamChunk):
                    overhead = StreamChunk.header_size(frame.stream_id, frame.offset, len(frame.data))
                    if room <= overhead:
                        break
                    take = min(len(frame.data), room - overhead)
                    if take < len(frame.data):
                        if take <= 0:
                            break
                        head = StreamChunk(frame.stream_id, frame.offset, frame.data[:take], False, frame.labels)
                        self._queue[0] = StreamChunk(
                            frame.stream_id, frame.offset + take, frame.data[take:], frame.fin, frame.labels
                        )
                        frame = head
                    else:
                        self._queue.popleft()
                else:
                    if len(frame.encode()) > room:
                        break
                    self._queue.popleft()
                blob = frame.encode()
                encoded.append(blob)
                frames.append(frame)
                room -= len(blob)
                labels.update(dict.fromkeys(frame.labels))
            if not encoded:
                break
            pn = self._take_pn()
            packet = build_packet(ONE_RTT, self.cid, pn, encoded)
            if frames:
                self._sent[pn] = _SentPacket(pn, now, frames, len(packet))
                self._last_eliciting_sent = now
            elif not labels:
                labels[LABEL_ACK] = None
            self._transmit(packet, tuple(labels))
        self._set_recovery_timer()
        self._check_idle()

    # -- acknowledgements -----------------------------------------------------------

    def _ack_frame(self) -> AckFrame:
        ranges: list[tuple[int, int]] = []
        for pn in sorted(self._received_pns, reverse=True):
            if ranges and ranges[-1][1] == pn + 1:
                ranges[-1] = (ranges[-1][0], pn)
            else:
                ranges.append((pn, pn))
        return AckFrame(ranges)

    def _clear_ack(self) -> None:
        self._unacked_eliciting = 0
        if self._ack_timer is not None:
            self._ack_timer.cancel()
            self._ack_timer = None

    def _ack_timer_fired(self) -> None:
        self._ack_timer = None
        self._ack_pending = True
        self._flush()

    def _on_ack(self, ack: AckFrame, now: float) -> None:
        acked = [pn for pn in list(self._sent) if any(lo <= pn <= hi for hi, lo in ack.ranges)]
        if not acked:
            return
        largest = max(acked)
        if largest > self._largest_acked:
            self._largest_acked = largest
            self._update_rtt(now - self._sent[largest].time)
        for pn in acked:
            del self._sent[pn]
        self._pto_count = 0
        self._detect_lost(now)

    def _update_rtt(self, sample: float) -> None:
        self.latest_rtt = sample
        if self.srtt is None:
            self.srtt = sample
            self.rttvar = sample / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
            self.srtt = 0.875 * self.srtt + 0.125 * sample

    def _detect_lost(self, now: float) -> None:
        self._loss_time = None
        srtt = self.srtt if self.srtt is not None else self.config.initial_rtt
        loss_delay = self.config.time_threshold * max(srtt, self.latest_rtt)
        lost = []
        for pn in sorted(self._sent):
            if pn >= self._largest_acked:
                break
            sent = self._sent[pn]
            # same expression as the armed deadline, with slack for clock rounding
            if self._largest_acked - pn >= self.config.packet_threshold or sent.time + loss_delay <= now + _TIME_SLACK:
                lost.append(pn)
            elif self._loss_time is None or sent.time + loss_delay < self._loss_time:
                self._loss_time = sent.time + loss_delay
        if lost:
            self._requeue(lost)

    def _requeue(self, pns: list[int]) -> None:
        frames: list[Frame] = []
        for pn in pns:
            frames.extend(self._sent.pop(pn).frames)
        frames = [
            f for f in frames
            if not (isinstance(f, StreamChunk) and f.stream_id in self._reset_sent)
        ]
        self.stats.retransmitted_frames += len(frames)
        self._queue.extendleft(reversed(frames))
        self._schedule_flush()

    def _pto_interval(self) -> float:
        srtt = self.srtt if self.srtt is not None else self.config.initial_rtt
        return (srtt + max(4 * self.rttvar, 0.001) + self.config.max_ack_delay) * (2 ** self._pto_count)

    def _set_recovery_timer(self) -> None:
        if self._recovery_timer is not None:
            self._recovery_timer.cancel()
            self._recovery_timer = None
        if self.state != "established" or not self._sent:
            return
        when = self._loss_time if self._loss_time is not None else self._last_eliciting_sent + self._pto_interval()
        self._recovery_timer = self.loop.call_at(when, self._recovery_timeout)

    def _recovery_timeout(self) -> None:
        self._recovery_timer = None
        now = self.loop.time()
        if self._loss_time is not None:
            self._detect_lost(now)
        elif self._sent:
            self._pto_count += 1
            self.stats.probe_timeouts += 1
            self._requeue([min(self._sent)])
        self._set_recovery_timer()

    def _is_idle(self) -> bool:
        return not self._queue and not self._sent

    def _check_idle(self) -> None:
        if self._idle_waiters and (self._is_idle() or self.state == "closed"):
            waiters, self._idle_waiters = self._idle_waiters, []
            for waiter in waiters:
                if not waiter.done():
                    if self.state == "closed" and not self._is_idle():
                        waiter.set_exception(TransportError("connection closed with unacknowledged data"))
                    else:
                        waiter.set_result(None)

    # -- receiving ------------------------------------------------------------------

    def datagram_received(self, datagram: bytes) -> None:
        if self.state == "closed":
            return
        try:
            kind, _, pn, payload = split_packet(datagram)
            frames = parse_frames(payload)
        except MalformedDatagram as exc:
            logger.debug("%s: dropping malformed datagram: %s", self.flow, exc)
            return
        self.stats.packets_received += 1
        now = self.loop.time()
        if kind == INITIAL:
            if not self.is_client:
                self._server_on_hello()
        elif kind == HANDSHAKE:
            if self.is_client:
                for frame in frames:
                    if isinstance(frame, CryptoFrame):
                        self._crypto_rx.setdefault(frame.offset, frame.data)
                self._client_check_flight(now)
        else:
            self._on_one_rtt(pn, frames, now)

    def _server_on_hello(self) -> None:
        if self.state == "idle":
            self.state = "handshake"
        if not self._server_confirmed:
            self._send_server_flight()

    def _client_check_flight(self, now: float) -> None:
        if self.state != "handshake":
            return
        stream = b""
        while len(stream) in self._crypto_rx:
            stream += self._crypto_rx[len(stream)]
        if len(stream) < 4 or len(stream) < int.from_bytes(stream[:4], "big"):
            return
        if self._hs_timer is not None:
            self._hs_timer.cancel()
            self._hs_timer = None
        # sample from the newest hello; retries would otherwise inflate it
        self._update_rtt(now - self._last_hello_at)
        self.state = "established"
        self.handshake_completed_at = now
        self._finished_pending = True
        self._schedule_flush()
        self.handshake_complete.set_result(None)
        if self.app is not None:
            self.app.handshake_completed()

    def _on_one_rtt(self, pn: int, frames: list[Frame], now: float) -> None:
        if not self.is_client and not self._server_confirmed:
            self._server_confirmed = True
            self.state = "established"
            if self._flight_sent_at is not None:
                self._update_rtt(now - self._flight_sent_at)
            self._queue.append(ControlFrame(F_HANDSHAKE_DONE))
            self._schedule_flush()
            self.handshake_complete.set_result(None)
            self.handshake_completed_at = now
            if self.app is not None:
                self.app.handshake_completed()
        duplicate = pn in self._received_pns
        eliciting = any(not isinstance(f, AckFrame) for f in frames)
        self._received_pns.add(pn)
        if eliciting:
            self._unacked_eliciting += 1
            if duplicate or self._unacked_eliciting >= self.config.ack_every:
                self._ack_pending = True
                self._schedule_flush()
            elif self._ack_timer is None:
                self._ack_timer = self.loop.call_later(self.config.max_ack_delay, self._ack_timer_fired)
        if duplicate:
            return
        for frame in frames:
            if self.state == "closed":
                return
            if isinstance(frame, AckFrame):
                self._on_ack(frame, now)
            elif isinstance(frame, StreamChunk):
                self._on_stream_chunk(frame)
            elif isinstance(frame, ControlFrame):
                self._on_control(frame)
        self._set_recovery_timer()
        self._check_idle()

    def _on_stream_chunk(self, chunk: StreamChunk) -> None:
        stream = self._recv.setdefault(chunk.stream_id, _RecvStream())
        if stream.finished:
            return
        if chunk.fin:
            stream.fin_offset = chunk.offset + len(chunk.data)
        end = chunk.offset + len(chunk.data)
        if end > stream.next_offset or (chunk.fin and not chunk.data):
            stream.chunks.setdefault(chunk.offset, chunk.data)
        delivered = bytearray()
        progress = True
        while progress:
            progress = False
            for offset in list(stream.chunks):
                data = stream.chunks[offset]
                if offset + len(data) <= stream.next_offset:
                    del stream.chunks[offset]
                elif offset <= stream.next_offset:
                    delivered += data[stream.next_offset - offset :]
                    stream.next_offset = offset + len(data)
                    del stream.chunks[offset]
                    progress = True
        fin = stream.fin_offset is not None and stream.next_offset >= stream.fin_offset
        if fin:
            stream.finished = True
            stream.chunks.clear()
        if (delivered or fin) and self.app is not None:
            self.app.stream_data_received(chunk.stream_id, bytes(delivered), fin)

    def _on_control(self, frame: ControlFrame) -> None:
        if frame.kind == F_CONNECTION_CLOSE:
            error = None if frame.code == 0 else TransportError(f"peer closed with code {frame.code}")
            self._terminate(error)
        elif frame.kind == F_STOP_SENDING:
            if frame.stream_id not in self._send_closed or any(
                isinstance(f, StreamChunk) and f.stream_id == frame.stream_id for f in self._queue
            ):
                self.reset_stream(frame.stream_id, frame.code)
            if self.app is not None:
                self.app.stream_reset(frame.stream_id)
        elif frame.kind == F_RESET_STREAM:
            stream = self._recv.setdefault(frame.stream_id, _RecvStream())
            if not stream.finished:
                stream.finished = True
                if self.app is not None:
                    self.app.stream_reset(frame.stream_id)

    def _terminate(self, error: Exception | None) -> None:
        if self.state == "closed":
            return
        self.state = "closed"
        for timer in (self._hs_timer, self._ack_timer, self._recovery_timer):
            if timer is not None:
                timer.cancel()
        self._hs_timer = self._ack_timer = self._recovery_timer = None
        if not self.handshake_complete.done():
            self.handshake_complete.set_exception(error or TransportError("closed during handshake"))
            self.handshake_complete.exception()  # mark retrieved
        if not self.closed.done():
            self.closed.set_result(error)
        self._check_idle()
        if self.app is not None:
            self.app.connection_terminated(error)


AppFactory = Callable[[ModeledConnection], TransportApp]


class ModeledServer:
    """Accepts modeled connections on the broker endpoint, dispatching on ALPN."""

    def __init__(
        self,
        endpoint: LinkEndpoint,
        apps: dict[str, AppFactory],
        config: TransportConfig | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.apps = apps
        self.config = config or TransportConfig()
        self.connections: dict[str, ModeledConnection] = {}
        endpoint.on_datagram = self.datagram_received

    def datagram_received(self, datagram: bytes, flow: str) -> None:
        conn = self.connections.get(flow)
        if conn is None:
            conn = self._accept(datagram, flow)
            if conn is None:
                return
        conn.datagram_received(datagram)

    def _accept(self, datagram: bytes, flow: str) -> ModeledConnection | None:
        try:
            kind, _, _, payload = split_packet(datagram)
            frames = parse_frames(payload)
        except MalformedDatagram:
            return None
        if kind != INITIAL:
            return None
        hello = next((f.data for f in frames if isinstance(f, CryptoFrame)), b"")
        if not hello.startswith(b"CHLO"):
            return None
        try:
            length, pos = decode_quic_int(hello, 4)
        except Truncated:
            return None
        alpn = hello[pos : pos + length].decode(errors="replace")
        factory = self.apps.get(alpn)
        if factory is None:
            logger.debug("rejecting %s: no application for ALPN %r", flow, alpn)
            return None
        conn = ModeledConnection(self.endpoint, is_client=False, flow=flow, alpn=alpn, config=self.config)
        conn.app = factory(conn)
        self.connections[flow] = conn
        return conn


def open_client(
    endpoint: LinkEndpoint, alpn: str, config: TransportConfig | None = None
) -> ModeledConnection:
    """Create (but do not start) a client connection on ``endpoint``."""
    endpoint_flow = endpoint.name
    conn = ModeledConnection(endpoint, is_client=True, flow=endpoint_flow, alpn=alpn, config=config)
    endpoint.on_datagram = lambda datagram, _peer: conn.datagram_received(datagram)
    return conn
