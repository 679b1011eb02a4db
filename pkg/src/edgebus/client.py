"""Broker client: async core plus a blocking facade.

BrokerClient is callback-based and runs entirely on a Loop (real or
simulated), which is what the gateway, the sink and the simulation
harness want.  SyncClient wraps it with an event-per-call bridge for the
CLI and for tests that talk to real sockets.

The client owns the retry policy: on NotLeader, timeouts or connection
loss it refreshes metadata and tries again up to `attempts` times, so a
leadership change mid-produce costs latency, not an error.  Produces are
idempotent only from the broker's point of view (retrying a timed-out
batch can duplicate records); callers that need exactly-once must
deduplicate downstream, which is what the sink does.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from . import record, wire
from .errors import (
    BadRequest,
    BrokerUnavailable,
    EdgebusError,
    NotLeader,
    RequestTimeout,
    UnknownTopic,
)
from .topics import partition_for_key

DEFAULT_TIMEOUT_MS = 15_000.0
RETRY_DELAY_MS = 200.0

_RETRYABLE = (NotLeader, BrokerUnavailable, RequestTimeout)


@dataclass
class FetchResult:
    high_watermark: int
    earliest: int
    log_end: int
    records: list

    @property
    def next_offset(self) -> int:
        if self.records:
            return self.records[-1].offset + 1
        return -1


class _Pending:
    __slots__ = ("callback", "timer")

    def __init__(self, callback, timer):
        self.callback = callback
        self.timer = timer


class BrokerClient:
    """Asynchronous client; every public method takes a callback(err, result)
    which runs exactly once on the loop thread."""

    def __init__(self, loop, network, bootstrap: list[str],
                 timeout_ms: float = DEFAULT_TIMEOUT_MS):
        if not bootstrap:
            raise BadRequest("bootstrap needs at least one broker address")
        self.loop = loop
        self.network = network
        self.bootstrap = list(bootstrap)
        self.timeout_ms = timeout_ms
        self._channels: dict[str, object] = {}
        self._pending: dict[str, dict[int, _Pending]] = {}
        self._corr = 0
        self._meta: dict | None = None
        self._rr: dict[str, int] = {}
        self.closed = False

    # -- low-level request plumbing ----------------------------------------

    def request(self, addr: str, msg_type: int, payload: bytes, callback,
                timeout_ms: float | None = None):
        if self.closed:
            self.loop.post(lambda: callback(BrokerUnavailable("client closed"), None))
            return
        try:
            channel = self._channel(addr)
        except (ConnectionError, OSError, TimeoutError) as e:
            err = BrokerUnavailable(f"connect {addr}: {e}")
            self.loop.post(lambda: callback(err, None))
            return
        self._corr += 1
        corr = self._corr
        pending = self._pending.setdefault(addr, {})

        def on_timeout():
            if corr in pending:
                del pending[corr]
                callback(RequestTimeout(f"no response from {addr}"), None)
        timer = self.loop.call_later(timeout_ms or self.timeout_ms, on_timeout)
        pending[corr] = _Pending(callback, timer)
        try:
            channel.send(msg_type, corr, payload)
        except (OSError, ValueError) as e:
            if corr in pending:
                del pending[corr]
                timer.cancel()
                err = BrokerUnavailable(f"send to {addr}: {e}")
                self.loop.post(lambda: callback(err, None))

    def _channel(self, addr: str):
        ch = self._channels.get(addr)
        if ch is not None and not ch.closed:
            return ch
        ch = self.network.connect(addr)
        ch.set_handler(
            lambda _c, mt, cid, pl: self._on_response(addr, cid, pl),
            lambda _c: self._on_channel_closed(addr, ch))
        self._channels[addr] = ch
        return ch

    def _on_response(self, addr: str, corr: int, payload: bytes):
        pending = self._pending.get(addr, {})
        p = pending.pop(corr, None)
        if p is None:
            return
        p.timer.cancel()
        try:
            body = wire.split_response(payload)
        except EdgebusError as e:
            p.callback(e, None)
            return
        p.callback(None, body)

    def _on_channel_closed(self, addr: str, channel):
        if self._channels.get(addr) is channel:
            del self._channels[addr]
        pending = self._pending.pop(addr, {})
        for p in pending.values():
            p.timer.cancel()
            p.callback(BrokerUnavailable(f"connection to {addr} lost"), None)

    def close(self):
        self.closed = True
        for pending in self._pending.values():
            for p in pending.values():
                p.timer.cancel()
        self._pending.clear()
        for ch in self._channels.values():
            ch.close()
        self._channels.clear()

    # -- metadata ------------------------------------------------------------

    def metadata(self, callback, force: bool = False):
        """callback(err, meta) where meta has controller/brokers/topics."""
        if self._meta is not None and not force:
            self.loop.post(lambda: callback(None, self._meta))
            return
        candidates = []
        if self._meta is not None:
            candidates.extend(a for a in self._meta["brokers"].values() if a)
        candidates.extend(a for a in self.bootstrap if a not in candidates)
        self._try_metadata(candidates, 0, callback)

    def _try_metadata(self, addrs: list[str], i: int, callback):
        if i >= len(addrs):
            callback(BrokerUnavailable("no broker reachable for metadata"), None)
            return

        def done(err, body):
            if err is not None:
                self._try_metadata(addrs, i + 1, callback)
                return
            info = wire.decode_json(body)
            info["topics_by_name"] = {t["name"]: t for t in info["topics"]}
            self._meta = info
            callback(None, info)
        self.request(addrs[i], wire.MSG_METADATA,
                     wire.encode_json({"op": "metadata"}), done,
                     timeout_ms=3000.0)

    def invalidate_metadata(self):
        self._meta = None

    def _topic_meta(self, meta: dict, topic: str) -> dict:
        t = meta["topics_by_name"].get(topic)
        if t is None:
            raise UnknownTopic(topic)
        return t

    def _addr_of(self, meta: dict, broker_id) -> str | None:
        return meta["brokers"].get(str(broker_id))

    # -- topic admin -----------------------------------------------------------

    def create_topic(self, name: str, partitions: int, replication_factor: int,
                     retention_ms: int, callback):
        body = {"op": "create_topic", "name": name, "partitions": partitions,
                "replication_factor": replication_factor,
                "retention_ms": retention_ms}

        def with_meta(err, meta):
            if err is not None:
                callback(err, None)
                return
            addr = self._addr_of(meta, meta["controller"])
            def done(cerr, ok_body):
                if cerr is not None:
                    callback(cerr, None)
                else:
                    self.invalidate_metadata()
                    callback(None, wire.decode_json(ok_body))
            self.request(addr, wire.MSG_METADATA, wire.encode_json(body), done)
        self.metadata(with_meta)

    def json_op(self, body: dict, callback, addr: str | None = None):
        """Send a JSON metadata-channel op (stats, describe) to one broker."""
        def with_meta(err, meta):
            if err is not None:
                callback(err, None)
                return
            target = addr or self._addr_of(meta, meta["controller"])
            def done(oerr, ok_body):
                callback(oerr, None if oerr else wire.decode_json(ok_body))
            self.request(target, wire.MSG_METADATA, wire.encode_json(body), done)
        self.metadata(with_meta)

    # -- produce -----------------------------------------------------------------

    def produce(self, topic: str, partition: int,
                entries: list[tuple[bytes | None, bytes, int]], callback,
                ack_mode: int = wire.ACK_ALL_ISR, attempts: int = 3):
        """Append entries (key, value, timestamp_ms) to one partition.
        callback(err, offsets) with offsets as [(partition, offset), ...].
        Pass partition=-1 to route by key client-side."""
        if partition < 0:
            self.produce_routed(topic, entries, callback, ack_mode, attempts)
            return
        frames = b"".join(record.encode_entry(ts, key, value)
                          for key, value, ts in entries)
        self._produce_attempt(topic, partition, frames, len(entries),
                              ack_mode, attempts, callback)

    def _produce_attempt(self, topic, partition, frames, count, ack_mode,
                         attempts_left, callback):
        def with_meta(err, meta):
            if err is not None:
                self._produce_retry(err, topic, partition, frames, count,
                                    ack_mode, attempts_left, callback)
                return
            try:
                t = self._topic_meta(meta, topic)
            except UnknownTopic as e:
                callback(e, None)
                return
            leader = t["leaders"][partition] if 0 <= partition < t["partition_count"] else None
            addr = self._addr_of(meta, leader) if leader is not None else None
            if addr is None:
                self._produce_retry(
                    NotLeader(f"{topic}/{partition} has no live leader"),
                    topic, partition, frames, count, ack_mode,
                    attempts_left, callback)
                return
            payload = wire.encode_produce(topic, partition, ack_mode, count, frames)

            def done(perr, body):
                if perr is not None and isinstance(perr, _RETRYABLE):
                    self._produce_retry(perr, topic, partition, frames, count,
                                        ack_mode, attempts_left, callback)
                elif perr is not None:
                    callback(perr, None)
                else:
                    committed, offsets = wire.decode_produce_ok(body)
                    callback(None, offsets)
            self.request(addr, wire.MSG_PRODUCE, payload, done)
        self.metadata(with_meta)

    def _produce_retry(self, err, topic, partition, frames, count, ack_mode,
                       attempts_left, callback):
        if attempts_left <= 1:
            callback(err, None)
            return
        self.invalidate_metadata()
        self.loop.call_later(RETRY_DELAY_MS, lambda: self._produce_attempt(
            topic, partition, frames, count, ack_mode, attempts_left - 1,
            callback))

    def produce_routed(self, topic: str, entries, callback,
                       ack_mode: int = wire.ACK_ALL_ISR, attempts: int = 3):
        """Route each entry by key (unkeyed entries round-robin), producing
        to every touched partition.  callback(err, offsets) keeps offsets in
        the original entry order; fails as a whole on the first error."""
        def with_meta(err, meta):
            if err is not None:
                callback(err, None)
                return
            try:
                t = self._topic_meta(meta, topic)
            except UnknownTopic as e:
                callback(e, None)
                return
            n = t["partition_count"]
            groups: dict[int, list[int]] = {}
            for i, (key, _value, _ts) in enumerate(entries):
                rr = self._rr.get(topic, 0)
                p = partition_for_key(key, n, rr)
                if key is None:
                    self._rr[topic] = rr + 1
                groups.setdefault(p, []).append(i)
            results: list = [None] * len(entries)
            state = {"left": len(groups), "failed": False}

            def group_done(gerr, idxs, offsets):
                if state["failed"]:
                    return
                if gerr is not None:
                    state["failed"] = True
                    callback(gerr, None)
                    return
                for i, po in zip(idxs, offsets):
                    results[i] = po
                state["left"] -= 1
                if state["left"] == 0:
                    callback(None, results)

            for p, idxs in groups.items():
                sub = [entries[i] for i in idxs]
                self.produce(topic, p, sub,
                             lambda e, offs, idxs=idxs: group_done(e, idxs, offs),
                             ack_mode, attempts)
        self.metadata(with_meta)

    # -- fetch ----------------------------------------------------------------------

    def fetch(self, topic: str, partition: int, from_offset: int, callback,
              max_bytes: int = 1 << 20, max_records: int = 0,
              wait_ms: int = 0, attempts: int = 3):
        """callback(err, FetchResult).  Tries the leader, then falls back to
        the other replicas (reads are served from any in-sync copy)."""
        def with_meta(err, meta):
            if err is not None:
                self._fetch_retry(err, topic, partition, from_offset, callback,
                                  max_bytes, max_records, wait_ms, attempts)
                return
            try:
                t = self._topic_meta(meta, topic)
            except UnknownTopic as e:
                callback(e, None)
                return
            if not 0 <= partition < t["partition_count"]:
                callback(BadRequest(f"no partition {partition} in {topic}"), None)
                return
            leader = t["leaders"][partition]
            order = [b for b in [leader] + t["assignment"][partition]
                     if b is not None]
            addrs = []
            for b in order:
                a = self._addr_of(meta, b)
                if a is not None and a not in addrs:
                    addrs.append(a)
            if not addrs:
                self._fetch_retry(
                    BrokerUnavailable(f"no replica reachable for {topic}/{partition}"),
                    topic, partition, from_offset, callback,
                    max_bytes, max_records, wait_ms, attempts)
                return
            self._fetch_from(addrs, 0, topic, partition, from_offset, callback,
                             max_bytes, max_records, wait_ms, attempts)
        self.metadata(with_meta)

    def _fetch_from(self, addrs, i, topic, partition, from_offset, callback,
                    max_bytes, max_records, wait_ms, attempts):
        if i >= len(addrs):
            self._fetch_retry(BrokerUnavailable("all replicas failed"),
                              topic, partition, from_offset, callback,
                              max_bytes, max_records, wait_ms, attempts)
            return
        payload = wire.encode_fetch(topic, partition, from_offset, max_bytes,
                                    max_records=max_records, wait_ms=wait_ms)

        def done(err, body):
            if err is not None and isinstance(err, _RETRYABLE):
                self._fetch_from(addrs, i + 1, topic, partition, from_offset,
                                 callback, max_bytes, max_records, wait_ms,
                                 attempts)
                return
            if err is not None:
                callback(err, None)
                return
            hw, earliest, log_end, count, frames = wire.decode_fetch_ok(body)
            records = record.decode_all(frames, from_offset) if count else []
            callback(None, FetchResult(hw, earliest, log_end, records))
        self.request(addrs[i], wire.MSG_FETCH, payload, done,
                     timeout_ms=wait_ms + 5000.0)

    def _fetch_retry(self, err, topic, partition, from_offset, callback,
                     max_bytes, max_records, wait_ms, attempts):
        if attempts <= 1:
            callback(err, None)
            return
        self.invalidate_metadata()
        self.loop.call_later(RETRY_DELAY_MS, lambda: self.fetch(
            topic, partition, from_offset, callback, max_bytes, max_records,
            wait_ms, attempts - 1))


class SyncClient:
    """Blocking wrapper around BrokerClient for CLI use and tests.

    Owns a real loop and network unless given ones; every call posts onto
    the loop thread and waits for the callback.
    """

    def __init__(self, bootstrap: list[str], loop=None, network=None,
                 timeout_ms: float = DEFAULT_TIMEOUT_MS):
        from .runtime import RealLoop, RealNetwork
        self._own_loop = loop is None
        self.loop = loop or RealLoop()
        self.network = network or RealNetwork(self.loop)
        self.client = BrokerClient(self.loop, self.network, bootstrap,
                                   timeout_ms)
        self._wait_s = (timeout_ms + 20_000.0) / 1000.0

    def _call(self, fn):
        done = threading.Event()
        box: list = [None, None]

        def cb(err, result):
            box[0], box[1] = err, result
            done.set()
        self.loop.post(lambda: fn(cb))
        if not done.wait(self._wait_s):
            raise RequestTimeout("client call did not complete")
        if box[0] is not None:
            raise box[0]
        return box[1]

    def metadata(self, force: bool = False) -> dict:
        return self._call(lambda cb: self.client.metadata(cb, force=force))

    def create_topic(self, name: str, partitions: int = 1,
                     replication_factor: int = 1,
                     retention_ms: int = 86_400_000) -> dict:
        return self._call(lambda cb: self.client.create_topic(
            name, partitions, replication_factor, retention_ms, cb))

    def produce(self, topic: str, partition: int, entries,
                ack_mode: int = wire.ACK_ALL_ISR, attempts: int = 3):
        return self._call(lambda cb: self.client.produce(
            topic, partition, entries, cb, ack_mode, attempts))

    def fetch(self, topic: str, partition: int, from_offset: int,
              max_bytes: int = 1 << 20, max_records: int = 0,
              wait_ms: int = 0) -> FetchResult:
        return self._call(lambda cb: self.client.fetch(
            topic, partition, from_offset, cb, max_bytes, max_records, wait_ms))

    def json_op(self, body: dict, addr: str | None = None) -> dict:
        return self._call(lambda cb: self.client.json_op(body, cb, addr=addr))

    def close(self):
        self.loop.post(self.client.close)
        if self._own_loop:
            self.loop.stop(drain=True)
