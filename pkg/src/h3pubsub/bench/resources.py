"""CPU sampling of a running process."""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass

import psutil

DEFAULT_PERIOD = 0.1


class Unsupported(RuntimeError):
    """The platform cannot report per-process CPU time."""


@dataclass(frozen=True)
class ResourceSample:
    ts: float
    cpu_fraction: float


def _cpu_seconds(process: psutil.Process) -> float:
    try:
        times = process.cpu_times()
    except (psutil.AccessDenied, NotImplementedError, AttributeError) as exc:
        raise Unsupported(f"cannot read CPU times: {exc}") from exc
    return times.user + times.system


def _as_process(process: psutil.Process | int | None) -> psutil.Process:
    if isinstance(process, psutil.Process):
        return process
    try:
        return psutil.Process(process)
    except psutil.Error as exc:
        raise Unsupported(str(exc)) from exc


class ResourceSampler:
    """Samples a process from a background thread until stopped or the process exits.

    ``ts`` is seconds since sampling started; ``cpu_fraction`` is CPU time
    used over the period divided by the wall time that elapsed, so a
    single saturated core reads about 1.0.
    """

    def __init__(self, process: psutil.Process | int | None = None, period: float = DEFAULT_PERIOD) -> None:
        if period <= 0:
            raise ValueError("period must be positive")
        self.process = _as_process(process)
        self.period = period
        self.samples: list[ResourceSample] = []
        _cpu_seconds(self.process)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> ResourceSampler:
        self._thread = threading.Thread(target=self._run, name="resource-sampler", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list[ResourceSample]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return self.samples

    def __enter__(self) -> ResourceSampler:
        return self.start()

    def __exit__(self, *exc_info: object) -> None:
        self.stop()

    def _run(self) -> None:
        origin = last_wall = time.monotonic()
        try:
            last_cpu = _cpu_seconds(self.process)
        except (Unsupported, psutil.NoSuchProcess):
            return
        deadline = origin
        while True:
            deadline += self.period
            if self._stop.wait(max(0.0, deadline - time.monotonic())):
                return
            try:
                cpu = _cpu_seconds(self.process)
            except (Unsupported, psutil.NoSuchProcess):
                return
            wall = time.monotonic()
            fraction = (cpu - last_cpu) / (wall - last_wall) if wall > last_wall else 0.0
            self.samples.append(ResourceSample(round(wall - origin, 4), round(max(0.0, fraction), 4)))
            last_cpu, last_wall = cpu, wall


def sample_resources(
    process: psutil.Process | int | None = None,
    period: float = DEFAULT_PERIOD,
    duration: float | None = None,
) -> list[ResourceSample]:
    """Sample until ``duration`` elapses or the process exits, whichever is first."""
    sampler = ResourceSampler(process, period)
    own = sampler.process.pid == os.getpid()
    if own and duration is None:
        raise ValueError("sampling this process needs a duration")
    sampler.start()
    try:
        if own:
            time.sleep(duration)
        elif duration is None:
            sampler.process.wait()
        else:
            try:
                sampler.process.wait(timeout=duration)
            except psutil.TimeoutExpired:
                pass
    except psutil.Error:
        pass
    return sampler.stop()
