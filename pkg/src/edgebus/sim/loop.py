"""Virtual-time event loop.

Runs every scheduled callback in (time, sequence) order on the calling
thread; the clock jumps between events, so a simulated minute costs only
the handler time.  Ties are broken by insertion order, which makes runs
with identical inputs bit-identical.
"""

from __future__ import annotations

import heapq
import itertools

from ..runtime import Timer


class SimLoop:
    def __init__(self, start_ms: float = 0.0):
        self._now = float(start_ms)
        self._heap = []  # (due, seq, Timer)
        self._seq = itertools.count()

    def now_ms(self) -> float:
        return self._now

    def call_later(self, delay_ms: float, fn) -> Timer:
        t = Timer(fn)
        heapq.heappush(self._heap, (self._now + max(0.0, delay_ms),
                                    next(self._seq), t))
        return t

    def post(self, fn) -> Timer:
        return self.call_later(0.0, fn)

    def _pop_due(self, limit_ms: float):
        while self._heap and self._heap[0][0] <= limit_ms:
            due, _, timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            return due, timer
        return None

    def run_until(self, t_ms: float):
        """Advances virtual time to exactly t_ms, running all due events."""
        while True:
            item = self._pop_due(t_ms)
            if item is None:
                break
            self._now = max(self._now, item[0])
            item[1].fn()
        self._now = max(self._now, float(t_ms))

    def run_until_idle(self, max_ms: float | None = None) -> bool:
        """Runs until no events remain (True) or max_ms reached (False)."""
        while True:
            if not self._heap:
                return True
            due = self._heap[0][0]
            if max_ms is not None and due > max_ms:
                self._now = max(self._now, max_ms)
                return False
            item = self._pop_due(due)
            if item is None:
                continue
            self._now = max(self._now, item[0])
            item[1].fn()

    def pending(self) -> int:
        return sum(1 for _, _, t in self._heap if not t.cancelled)
