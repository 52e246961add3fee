from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from h3pubsub.mqtt.packets import (
    ConnAck,
    Connect,
    Disconnect,
    IncompletePacket,
    MalformedPacket,
    MqttCodecError,
    PacketStream,
    Publish,
    Subscribe,
    decode_packet,
    encode_packet,
)
from oracles import mqtt_utf8, publish_body_length, varint_oracle
from strategies import mqtt_packets, mqtt_text


@given(mqtt_packets)
def test_round_trip(packet):
    wire = encode_packet(packet)
    assert decode_packet(wire) == (packet, len(wire))


@given(mqtt_text.filter(bool), st.binary(max_size=20_000))
def test_publish_layout_matches_oracle(topic, payload):
    body = publish_body_length(topic, payload)
    expected = b"\x30" + varint_oracle(body) + mqtt_utf8(topic) + b"\x00" + payload
    assert encode_packet(Publish(topic, payload)) == expected


def test_connect_known_bytes():
    wire = encode_packet(Connect("c", username="u", password=b"p", keep_alive=10))
    assert wire == bytes.fromhex("101400044d515454" "05c2000a00" "000163" "000175" "000170")


def test_subscribe_flags_nibble():
    assert encode_packet(Subscribe(1, "t"))[0] == 0x82


@given(mqtt_packets, st.data())
def test_single_byte_mutation_never_misparses(packet, data):
    wire = bytearray(encode_packet(packet))
    index = data.draw(st.integers(0, len(wire) - 1))
    wire[index] ^= data.draw(st.integers(1, 255))
    try:
        decoded, used = decode_packet(bytes(wire))
    except MqttCodecError:
        return
    # anything accepted must be the canonical encoding of what it decoded to
    assert encode_packet(decoded) == bytes(wire[:used])


@given(mqtt_packets)
def test_truncation_is_incomplete(packet):
    wire = encode_packet(packet)
    for cut in range(len(wire)):
        with pytest.raises(IncompletePacket):
            decode_packet(wire[:cut])


@given(st.lists(mqtt_packets, max_size=10), st.integers(1, 50))
def test_stream_reassembly(packets, chunk):
    wire = b"".join(encode_packet(p) for p in packets)
    stream, out = PacketStream(), []
    for i in range(0, len(wire), chunk):
        out.extend(stream.feed(wire[i : i + chunk]))
    assert out == packets
    assert stream.pending == 0


@pytest.mark.parametrize(
    "wire",
    [
        b"\x00\x00",  # reserved type
        b"\x31\x03\x00\x01t",  # PUBLISH with QoS bits set
        b"\x80\x05\x00\x01\x00\x00\x00",  # SUBSCRIBE with wrong flags
        b"\x20\x04\x00\x00\x00\xff",  # trailing byte
        b"\x30\x05\x00\x01t\x01\x00",  # unsupported property block
        b"\x30\x04\x00\x01\xff\x00",  # invalid UTF-8 topic
        b"\x30\x80\x00",  # non-minimal remaining length
        b"\x90\x04\x00\x00\x00\x00",  # SUBACK packet id 0
    ],
)
def test_malformed(wire):
    with pytest.raises(MalformedPacket):
        decode_packet(wire)


@pytest.mark.parametrize("packet", [Publish("", b""), Subscribe(0, "t"), ConnAck(256), Connect("a\x00b")])
def test_encoder_rejects(packet):
    with pytest.raises(ValueError):
        encode_packet(packet)


def test_auth_gated_flag():
    assert Connect("c", username="u").auth_gated
    assert Connect("c", auth_method="SCRAM").auth_gated
    assert not Connect("c").auth_gated
    assert decode_packet(encode_packet(Disconnect(0x8E)))[0] == Disconnect(0x8E)
