"""An asyncio event loop driven by a virtual clock.

Time only advances when the loop would otherwise sleep: instead of blocking
for the next timer, the clock jumps straight to it.  Coroutines written for
a real loop (``asyncio.sleep``, ``call_at``, ``wait_for``) therefore run
unchanged, deterministically, and as fast as the CPU allows.
"""

from __future__ import annotations

import asyncio
import selectors
from typing import Awaitable, TypeVar

T = TypeVar("T")


class VirtualTimeDeadlock(RuntimeError):
    """Nothing is scheduled and nothing can wake the loop."""


class _VirtualSelector(selectors.DefaultSelector):
    def __init__(self) -> None:
        super().__init__()
        self.loop: VirtualClockLoop | None = None

    def select(self, timeout: float | None = None):
        # the loop's own self-pipe is still registered, so poll without blocking
        ready = super().select(0)
        if ready:
            return ready
        if timeout is None:
            raise VirtualTimeDeadlock("virtual loop has no pending timers or callbacks")
        if timeout > 0:
            self.loop._advance(timeout)
        return []


class VirtualClockLoop(asyncio.SelectorEventLoop):
    def __init__(self, start: float = 0.0) -> None:
        selector = _VirtualSelector()
        super().__init__(selector)
        selector.loop = self
        self._virtual_now = start

    def time(self) -> float:
        return self._virtual_now

    def _advance(self, delta: float) -> None:
        self._virtual_now += delta


def run_virtual(main: Awaitable[T], start: float = 0.0) -> T:
    """Run ``main`` to completion on a fresh virtual-time loop."""
    loop = VirtualClockLoop(start)
    try:
        return loop.run_until_complete(main)
    finally:
        _cancel_remaining(loop)
        loop.close()


def _cancel_remaining(loop: asyncio.AbstractEventLoop) -> None:
    pending = [task for task in asyncio.all_tasks(loop) if not task.done()]
    for task in pending:
        task.cancel()
    if pending:
        try:
            loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        except VirtualTimeDeadlock:
            pass
