from .client import MqttClient
from .packets import decode_packet, encode_packet
from .session import ClientSession, MqttBrokerSession, Phase, ProtocolViolation
from .varint import decode_varint, encode_varint

__all__ = [
    "ClientSession",
    "MqttBrokerSession",
    "MqttClient",
    "Phase",
    "ProtocolViolation",
    "decode_packet",
    "decode_varint",
    "encode_packet",
    "encode_varint",
]
