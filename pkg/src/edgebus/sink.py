"""Consumer that drains measurement topics into the time-series store.

The sink owns its own positions (the broker remembers nothing about
consumers): a JSON checkpoint maps topic/partition to the next offset.
Each fetched batch is decoded, upserted, and flushed to the store
*before* the checkpoint advances, so a crash replays the tail of the
last batch and the store's source dedup makes the replay invisible.

Poison records are quarantined to a dead-letter JSONL file and the
position still advances; one bad client must not stall a city feed.
Dead-letter lines can repeat across crash replays, so anything counting
them should key by (topic, partition, offset).

A token bucket caps drain speed in records per second.  That exists for
the bursty-workload scenarios: the broker absorbs the burst while the
sink works it off at its own pace.
"""

from __future__ import annotations

import json
import math
import os
from base64 import b64encode
from dataclasses import dataclass
from pathlib import Path

from .client import BrokerClient
from .errors import DecodeError, OffsetOutOfRange
from .topics import fnv1a_32
from .tsstore import DAY_MS, StoredPoint, TsStore


def stream_id(topic: str, partition: int) -> int:
    """Stable 32-bit source namespace for (topic, partition).

    A stored point's source is (partition, offset); when several topics
    share one store, bare partition numbers collide and dedup would eat
    records that merely share coordinates.  Salting the high 16 bits
    with a hash of the topic name keeps sources distinct per topic and
    stays stable across sink restarts and config reordering.
    """
    return ((fnv1a_32(topic.encode("utf-8")) & 0xFFFF) << 16) | (partition & 0xFFFF)


@dataclass
class SinkConfig:
    store_dir: str
    topics: list[str]
    max_records_per_fetch: int = 500
    fetch_bytes: int = 1 << 20
    wait_ms: int = 500  # server-side long poll when caught up
    retry_delay_ms: float = 500.0
    rate_limit_per_s: float | None = None  # records/second drain cap
    bucket_ms: int = DAY_MS


class TokenBucket:
    """records-per-second budget; capacity is one second's worth."""

    def __init__(self, rate_per_s: float, now_ms: float):
        self.rate = rate_per_s
        self.capacity = max(rate_per_s, 1.0)
        self.tokens = self.capacity
        self.stamp = now_ms

    def _refill(self, now_ms: float):
        self.tokens = min(self.capacity,
                          self.tokens + (now_ms - self.stamp) * self.rate / 1000.0)
        self.stamp = now_ms

    def available(self, now_ms: float) -> int:
        self._refill(now_ms)
        return max(0, int(self.tokens))

    def take(self, n: int, now_ms: float):
        self._refill(now_ms)
        self.tokens -= n  # may go negative when a fetch over-delivers

    def ms_until(self, n: int, now_ms: float) -> float:
        self._refill(now_ms)
        deficit = n - self.tokens
        if deficit <= 0:
            return 0.0
        return deficit * 1000.0 / self.rate


def parse_measurement(raw: bytes, source_partition: int, offset: int
                      ) -> tuple[str, StoredPoint]:
    """Decode one measurement record value into (series, StoredPoint).
    source_partition is usually a stream_id(), not a bare partition."""
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DecodeError(f"not JSON: {e}") from None
    if not isinstance(obj, dict):
        raise DecodeError("measurement must be a JSON object")
    series = obj.get("series")
    device = obj.get("device_pseudonym")
    ts = obj.get("timestamp_ms")
    value = obj.get("value")
    if not isinstance(series, str) or not series:
        raise DecodeError("missing series")
    if not isinstance(device, str) or not device:
        raise DecodeError("missing device_pseudonym")
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise DecodeError("missing timestamp_ms")
    if not isinstance(value, (int, float)) or isinstance(value, bool) \
            or not math.isfinite(value):
        raise DecodeError("value must be a finite number")
    lat, lon = obj.get("lat"), obj.get("lon")
    if (lat is None) != (lon is None):
        raise DecodeError("lat and lon must come together")
    if lat is not None and not (
            isinstance(lat, (int, float)) and isinstance(lon, (int, float))
            and math.isfinite(lat) and math.isfinite(lon)):
        raise DecodeError("lat/lon must be finite numbers")
    point = StoredPoint(ts, device, (source_partition, offset), float(value),
                        None if lat is None else float(lat),
                        None if lon is None else float(lon))
    return series, point


class SinkCore:
    """Drains all partitions of the configured topics into a TsStore."""

    def __init__(self, loop, network, bootstrap: list[str], config: SinkConfig):
        self.loop = loop
        self.cfg = config
        self.client = BrokerClient(loop, network, bootstrap)
        self.store = TsStore(config.store_dir, bucket_ms=config.bucket_ms)
        self._checkpoint_path = Path(config.store_dir) / "checkpoint.json"
        self._dead_letter_path = Path(config.store_dir) / "dead_letter.jsonl"
        self.positions: dict[tuple[str, int], int] = {}
        self.high_watermarks: dict[tuple[str, int], int] = {}
        self.counters = {"stored": 0, "duplicates": 0, "dead_lettered": 0,
                         "fetch_rounds": 0, "empty_fetches": 0}
        self.gaps: list[dict] = []
        self._dead_seen: set[tuple[str, int, int]] = set()
        self._bucket = None
        if config.rate_limit_per_s:
            self._bucket = TokenBucket(config.rate_limit_per_s, loop.now_ms())
        self._timers: dict[tuple[str, int], object] = {}
        self._discovery_timer = None
        self._undiscovered: set[str] = set()
        self.stopped = False
        # optional observer: called as on_batch((topic, partition), records)
        # after each ingested batch is durable and checkpointed
        self.on_batch = None

    # -- lifecycle -----------------------------------------------------------

    def start(self):
        self._load_checkpoint()
        self._undiscovered = set(self.cfg.topics)
        self._discover()
        return self

    def stop(self):
        self.stopped = True
        for timer in self._timers.values():
            timer.cancel()
        self._timers.clear()
        if self._discovery_timer is not None:
            self._discovery_timer.cancel()
        self.client.close()
        self.store.close()

    def halt(self):
        """Crash-like stop: nothing is flushed or checkpointed."""
        self.stopped = True
        for timer in self._timers.values():
            timer.cancel()
        self._timers.clear()
        if self._discovery_timer is not None:
            self._discovery_timer.cancel()
        self.client.close()
        self.store.abandon()

    # -- positions -----------------------------------------------------------

    def _load_checkpoint(self):
        if not self._checkpoint_path.exists():
            return
        state = json.loads(self._checkpoint_path.read_text())
        for key, offset in state.get("positions", {}).items():
            topic, _, partition = key.rpartition("/")
            self.positions[(topic, int(partition))] = offset

    def _save_checkpoint(self):
        state = {"v": 1, "positions": {
            f"{t}/{p}": off for (t, p), off in sorted(self.positions.items())}}
        tmp = self._checkpoint_path.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(state, f, sort_keys=True)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self._checkpoint_path)

    def checkpoint_state(self) -> dict[tuple[str, int], int]:
        """The durably persisted positions (what a restart would resume from)."""
        out = {}
        if self._checkpoint_path.exists():
            state = json.loads(self._checkpoint_path.read_text())
            for key, offset in state.get("positions", {}).items():
                topic, _, partition = key.rpartition("/")
                out[(topic, int(partition))] = offset
        for tp in self.positions:
            out.setdefault(tp, 0)
        return out

    def lag(self) -> int:
        """Known backlog: sum of high_watermark - position over partitions."""
        return sum(max(0, self.high_watermarks.get(tp, 0) - pos)
                   for tp, pos in self.positions.items())

    @property
    def drained(self) -> bool:
        """Caught up with every partition whose watermark we have seen; a
        partition that has never answered a fetch does not count as done."""
        return (not self._undiscovered and bool(self.positions)
                and all(tp in self.high_watermarks
                        and pos >= self.high_watermarks[tp]
                        for tp, pos in self.positions.items()))

    def stats(self) -> dict:
        return {
            "counters": dict(self.counters),
            "gaps": [dict(g) for g in self.gaps],
            "positions": {f"{t}/{p}": off
                          for (t, p), off in sorted(self.positions.items())},
            "lag": self.lag(),
        }

    # -- partition discovery ---------------------------------------------------

    def _discover(self):
        if self.stopped or not self._undiscovered:
            return

        def with_meta(err, meta):
            if self.stopped:
                return
            if err is None:
                for topic in sorted(self._undiscovered):
                    t = meta["topics_by_name"].get(topic)
                    if t is None:
                        continue
                    self._undiscovered.discard(topic)
                    for p in range(t["partition_count"]):
                        tp = (topic, p)
                        self.positions.setdefault(tp, 0)
                        self._schedule_fetch(tp, 0.0)
            if self._undiscovered:
                self.client.invalidate_metadata()
                self._discovery_timer = self.loop.call_later(
                    self.cfg.retry_delay_ms, self._discover)
        self.client.metadata(with_meta)

    # -- the drain loop ---------------------------------------------------------

    def _schedule_fetch(self, tp: tuple[str, int], delay_ms: float):
        if self.stopped or tp in self._timers:
            return
        def fire():
            self._timers.pop(tp, None)
            self._fetch(tp)
        self._timers[tp] = self.loop.call_later(delay_ms, fire)

    def _fetch(self, tp: tuple[str, int]):
        if self.stopped:
            return
        limit = self.cfg.max_records_per_fetch
        if self._bucket is not None:
            now = self.loop.now_ms()
            allowed = self._bucket.available(now)
            if allowed < 1:
                # never a zero delay: float crumbs must not pin virtual time
                self._schedule_fetch(tp, max(1.0, self._bucket.ms_until(1, now)))
                return
            limit = min(limit, allowed)
        topic, partition = tp
        self.client.fetch(
            topic, partition, self.positions[tp],
            lambda err, res: self._on_fetch(tp, err, res),
            max_bytes=self.cfg.fetch_bytes, max_records=limit,
            wait_ms=self.cfg.wait_ms)

    def _on_fetch(self, tp: tuple[str, int], err, res):
        if self.stopped:
            return
        if isinstance(err, OffsetOutOfRange):
            self._record_gap(tp, err)
            self._schedule_fetch(tp, 0.0)
            return
        if err is not None:
            # broker down or leadership moving; back off and retry forever
            self._schedule_fetch(tp, self.cfg.retry_delay_ms)
            return
        self.counters["fetch_rounds"] += 1
        self.high_watermarks[tp] = res.high_watermark
        if not res.records:
            self.counters["empty_fetches"] += 1
            self._schedule_fetch(tp, 0.0 if self.cfg.wait_ms else
                                 self.cfg.retry_delay_ms)
            return
        if self._bucket is not None:
            self._bucket.take(len(res.records), self.loop.now_ms())
        self._ingest(tp, res.records)
        self.positions[tp] = res.records[-1].offset + 1
        self._save_checkpoint()
        if self.on_batch is not None:
            # fires only after the checkpoint moved: observers see records
            # no earlier than they became durable
            self.on_batch(tp, res.records)
        self._schedule_fetch(tp, 0.0)

    def _record_gap(self, tp: tuple[str, int], err: OffsetOutOfRange):
        topic, partition = tp
        earliest = err.extra.get("earliest_offset", 0)
        old = self.positions[tp]
        self.gaps.append({
            "topic": topic, "partition": partition,
            "from_offset": old, "to_offset": earliest,
            "missed": max(0, earliest - old),
            "at_ms": self.loop.now_ms(),
        })
        self.positions[tp] = earliest
        self._save_checkpoint()

    def _ingest(self, tp: tuple[str, int], records):
        topic, partition = tp
        stream = stream_id(topic, partition)
        by_series: dict[str, list[StoredPoint]] = {}
        staged = 0
        for rec in records:
            try:
                series, point = parse_measurement(rec.value, stream,
                                                  rec.offset)
            except DecodeError as e:
                self._dead_letter(topic, partition, rec.offset, rec.value, e)
                continue
            by_series.setdefault(series, []).append(point)
            staged += 1
        fresh = 0
        for series, points in sorted(by_series.items()):
            fresh += self.store.upsert(series, points)
        self.store.flush()  # durable before the checkpoint moves
        self.counters["stored"] += fresh
        self.counters["duplicates"] += staged - fresh

    def _dead_letter(self, topic: str, partition: int, offset: int,
                     raw: bytes, err: DecodeError):
        key = (topic, partition, offset)
        if key in self._dead_seen:
            return
        self._dead_seen.add(key)
        line = json.dumps({
            "topic": topic, "partition": partition, "offset": offset,
            "raw": b64encode(raw).decode("ascii"), "error": err.detail,
        }, sort_keys=True)
        with open(self._dead_letter_path, "a") as f:
            f.write(line + "\n")
        self.counters["dead_lettered"] += 1
