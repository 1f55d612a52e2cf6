"""Injected logical clocks. All times are integer milliseconds."""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> int: ...


class SimClock:
    """Manually advanced clock used by the simulator and tests."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms

    def now(self) -> int:
        return self._now

    def advance_to(self, t_ms: int) -> None:
        if t_ms < self._now:
            raise ValueError(f"clock cannot move backwards ({t_ms} < {self._now})")
        self._now = t_ms

    def advance(self, delta_ms: int) -> None:
        self.advance_to(self._now + delta_ms)


class MonotonicClock:
    """Wall-clock adapter; never goes backwards, even across threads."""

    def __init__(self):
        self._origin = time.monotonic_ns()
        self._last = 0
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            t = (time.monotonic_ns() - self._origin) // 1_000_000
            self._last = max(self._last, t)
            return self._last
