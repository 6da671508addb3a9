"""Injectable clocks: wall time for the live service, virtual time for simulation.

All timestamps in the system are integer milliseconds since epoch. Code that
needs the current time takes a ``Clock`` so tests and the simulator control it.
"""

from __future__ import annotations

import time


class Clock:
    """Interface: anything with a ``now_ms() -> int``."""

    def now_ms(self) -> int:
        raise NotImplementedError


class WallClock(Clock):
    """Real wall-clock time."""

    def now_ms(self) -> int:
        return int(time.time() * 1000)


class VirtualClock(Clock):
    """Manually advanced clock for deterministic runs.

    Time never moves on its own; the event loop driving the run calls
    ``set_ms``/``advance_ms`` as it processes scheduled work.
    """

    def __init__(self, start_ms: int = 0) -> None:
        self._now_ms = start_ms

    def now_ms(self) -> int:
        return self._now_ms

    def set_ms(self, now_ms: int) -> None:
        if now_ms < self._now_ms:
            raise ValueError(f"virtual time cannot move backwards: {now_ms} < {self._now_ms}")
        self._now_ms = now_ms

    def advance_ms(self, delta_ms: int) -> None:
        self.set_ms(self._now_ms + delta_ms)


class ScaledClock(Clock):
    """Wall-clock time replayed on an accelerated virtual timeline.

    Virtual time starts at ``origin_ms`` and advances ``scale`` times faster
    than wall time. ``scale=1.0`` behaves like a wall clock offset to the
    origin; large scales let real-timer runs finish quickly while keeping the
    scheduler's arithmetic in virtual milliseconds.
    """

    def __init__(self, scale: float = 1.0, origin_ms: int | None = None) -> None:
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = scale
        self.origin_ms = int(time.time() * 1000) if origin_ms is None else origin_ms
        self._wall_origin = time.time()

    def now_ms(self) -> int:
        elapsed_wall = time.time() - self._wall_origin
        return self.origin_ms + int(elapsed_wall * 1000 * self.scale)

    def ensure_at_least(self, virtual_ms: int) -> None:
        """Jump forward so ``now_ms()`` is at least ``virtual_ms``.

        Needed when resuming state persisted by an accelerated clock whose
        virtual timeline ran ahead of the wall epoch; virtual time must never
        step backwards across a restart.
        """
        deficit = virtual_ms - self.now_ms()
        if deficit > 0:
            self.origin_ms += deficit

    def wall_seconds_until(self, virtual_ms: int) -> float:
        """Wall-clock seconds to sleep until virtual time reaches ``virtual_ms``."""
        remaining = virtual_ms - self.now_ms()
        if remaining <= 0:
            return 0.0
        return remaining / 1000.0 / self.scale
