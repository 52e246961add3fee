"""Publish-subscribe over HTTP/3 with an MQTT-over-QUIC baseline and an NB-IoT link model."""

from .core import (
    Broker,
    Message,
    PayloadTooLarge,
    SubscriberHandle,
    TopicName,
    TopicNotFound,
    TopicRule,
    UnknownHandle,
    ValidationError,
    validate_topic_name,
)

__all__ = [
    "Broker",
    "Message",
    "PayloadTooLarge",
    "SubscriberHandle",
    "TopicName",
    "TopicNotFound",
    "TopicRule",
    "UnknownHandle",
    "ValidationError",
    "validate_topic_name",
]
