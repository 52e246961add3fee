from .clock import VirtualClockLoop, run_virtual
from .link import CaptureStats, LinkEndpoint, Network, Trace, TraceEvent, capture_stats, make_link
from .profile import NetworkProfile, load_profile

__all__ = [
    "CaptureStats",
    "LinkEndpoint",
    "Network",
    "NetworkProfile",
    "Trace",
    "TraceEvent",
    "VirtualClockLoop",
    "capture_stats",
    "load_profile",
    "make_link",
    "run_virtual",
]
