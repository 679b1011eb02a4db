"""Activity accounting: request counters, latency histogram, request ring.

Counters only ever go up within a process lifetime.  A small lock makes
increments and snapshots safe from any thread even though the broker
normally touches them from its loop thread only.
"""

from __future__ import annotations

import threading
from collections import deque

# power-of-two microsecond buckets: le 1us, 2us, 4us ... ~17min, +inf
_BUCKET_COUNT = 31


class LatencyHistogram:
    def __init__(self):
        self.counts = [0] * (_BUCKET_COUNT + 1)
        self.total = 0
        self.sum_us = 0
        self.max_us = 0

    def record(self, us: int):
        us = max(0, int(us))
        idx = min(us.bit_length(), _BUCKET_COUNT)
        self.counts[idx] += 1
        self.total += 1
        self.sum_us += us
        self.max_us = max(self.max_us, us)

    def to_dict(self) -> dict:
        buckets = []
        for i, n in enumerate(self.counts):
            if n:
                le = (1 << i) - 1 if i < _BUCKET_COUNT else None
                buckets.append({"le_us": le, "count": n})
        return {"total": self.total, "sum_us": self.sum_us,
                "max_us": self.max_us, "buckets": buckets}


RING_SIZE = 1024


class ActivityStats:
    def __init__(self):
        self._lock = threading.Lock()
        self.connected_clients = 0
        self.produce_count = 0
        self.fetch_count = 0
        self.error_count = 0
        self.latency = LatencyHistogram()
        self.per_topic: dict[str, dict[str, int]] = {}
        self.recent = deque(maxlen=RING_SIZE)

    def client_connected(self, n=1):
        with self._lock:
            self.connected_clients += n

    def client_disconnected(self):
        with self._lock:
            self.connected_clients = max(0, self.connected_clients - 1)

    def _topic(self, topic: str) -> dict[str, int]:
        t = self.per_topic.get(topic)
        if t is None:
            t = {"messages_in": 0, "bytes_in": 0, "messages_out": 0, "bytes_out": 0}
            self.per_topic[topic] = t
        return t

    def record_produce(self, topic: str, messages: int, nbytes: int,
                       latency_us: int, ts_ms: float, partition: int, ok: bool):
        with self._lock:
            self.produce_count += 1
            if not ok:
                self.error_count += 1
            t = self._topic(topic)
            t["messages_in"] += messages
            t["bytes_in"] += nbytes
            self.latency.record(latency_us)
            self.recent.append({"ts_ms": ts_ms, "kind": "produce", "topic": topic,
                                "partition": partition, "latency_us": int(latency_us),
                                "status": "ok" if ok else "error"})

    def record_fetch(self, topic: str, messages: int, nbytes: int,
                     latency_us: int, ts_ms: float, partition: int, ok: bool):
        with self._lock:
            self.fetch_count += 1
            if not ok:
                self.error_count += 1
            t = self._topic(topic)
            t["messages_out"] += messages
            t["bytes_out"] += nbytes
            self.latency.record(latency_us)
            self.recent.append({"ts_ms": ts_ms, "kind": "fetch", "topic": topic,
                                "partition": partition, "latency_us": int(latency_us),
                                "status": "ok" if ok else "error"})

    def snapshot(self, topic: str | None = None, since_ms: float | None = None) -> dict:
        with self._lock:
            recent = [r for r in self.recent
                      if (topic is None or r["topic"] == topic)
                      and (since_ms is None or r["ts_ms"] >= since_ms)]
            return {
                "connected_clients": self.connected_clients,
                "produce_count": self.produce_count,
                "fetch_count": self.fetch_count,
                "error_count": self.error_count,
                "latency_us": self.latency.to_dict(),
                "topics": {k: dict(v) for k, v in sorted(self.per_topic.items())},
                "recent_requests": recent,
            }
