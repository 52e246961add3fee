"""Link conditioning profiles."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("virtual_time", "realtime")
_MODE_ALIASES = {"virtual": "virtual_time", "virtual_time": "virtual_time", "realtime": "realtime"}

# NB-IoT CAT NB2
NB_IOT_DOWNLINK_BPS = 127_000
NB_IOT_UPLINK_BPS = 159_000
NB_IOT_RTT = 2.0
# "typical" NB-IoT loss used by lossy scenarios; the exact figure is a knob
DEFAULT_LOSS = 0.01


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkProfile:
    """Per-direction rate, round-trip time and uniform loss.

    Rates are in bits per second (``math.inf`` disables shaping) and the
    RTT is split evenly: each direction adds ``rtt / 2`` of delay.
    """

    downlink_rate: float = NB_IOT_DOWNLINK_BPS
    uplink_rate: float = NB_IOT_UPLINK_BPS
    rtt: float = NB_IOT_RTT
    loss_probability: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.downlink_rate > 0 and self.uplink_rate > 0):
            raise ProfileError("rates must be positive")
        if not (self.rtt >= 0 and math.isfinite(self.rtt)):
            raise ProfileError("rtt must be a finite, non-negative duration")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ProfileError("loss_probability must lie in [0, 1]")
        if not isinstance(self.seed, int):
            raise ProfileError("seed must be an integer")

    @property
    def one_way_delay(self) -> float:
        return self.rtt / 2

    @classmethod
    def nb_iot(cls, loss_probability: float = 0.0, seed: int = 0) -> NetworkProfile:
        return cls(NB_IOT_DOWNLINK_BPS, NB_IOT_UPLINK_BPS, NB_IOT_RTT, loss_probability, seed)

    def with_seed(self, seed: int) -> NetworkProfile:
        return NetworkProfile(self.downlink_rate, self.uplink_rate, self.rtt, self.loss_probability, seed)

    def to_mapping(self) -> dict[str, Any]:
        return {
            "downlink_kbps": self.downlink_rate / 1000,
            "uplink_kbps": self.uplink_rate / 1000,
            "rtt_ms": self.rtt * 1000,
            "loss": self.loss_probability,
            "seed": self.seed,
        }

    def fingerprint_fields(self) -> dict[str, Any]:
        return asdict(self)


def profile_from_mapping(data: Mapping[str, Any]) -> tuple[NetworkProfile, str]:
    """Build a profile from the file keys; returns ``(profile, mode)``."""
    known = {"downlink_kbps", "uplink_kbps", "rtt_ms", "loss", "seed", "mode"}
    unknown = set(data) - known
    if unknown:
        raise ProfileError(f"unknown profile keys: {', '.join(sorted(unknown))}")
    mode = _MODE_ALIASES.get(str(data.get("mode", "virtual_time")))
    if mode is None:
        raise ProfileError(f"unknown mode {data['mode']!r}")
    try:
        profile = NetworkProfile(
            downlink_rate=float(data.get("downlink_kbps", NB_IOT_DOWNLINK_BPS / 1000)) * 1000,
            uplink_rate=float(data.get("uplink_kbps", NB_IOT_UPLINK_BPS / 1000)) * 1000,
            rtt=float(data.get("rtt_ms", NB_IOT_RTT * 1000)) / 1000,
            loss_probability=float(data.get("loss", 0.0)),
            seed=int(data.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ProfileError):
            raise
        raise ProfileError(str(exc)) from exc
    return profile, mode


def load_profile(path: str | Path) -> tuple[NetworkProfile, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProfileError(f"cannot read profile {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ProfileError(f"cannot parse profile {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ProfileError("profile must be a key-value mapping")
    return profile_from_mapping(data)


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ProfileError(f"unknown mode {mode!r}; expected one of {MODES}") from None
