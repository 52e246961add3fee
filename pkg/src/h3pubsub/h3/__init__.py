from .client import H3Client, StreamEndedAbnormally, Subscription, SubscriptionFailed
from .framing import EventFrameDecoder, decode_event_frames, encode_event_frame
from .routing import Route, StatusOutcome, route_request

__all__ = [
    "EventFrameDecoder",
    "H3Client",
    "Route",
    "StatusOutcome",
    "StreamEndedAbnormally",
    "Subscription",
    "SubscriptionFailed",
    "decode_event_frames",
    "encode_event_frame",
    "route_request",
]
