"""Broker node: owns the data dir, serves the binary protocol, and keeps
the cluster agreed on who leads each partition.

One process (or one simulated site) runs one BrokerNode.  The node is a
thin shell around three kinds of state:

    storage     a PartitionLog per hosted partition under
                data_dir/topics/<topic>/<partition>/
    replication a PartitionReplica per hosted partition (see
                replication.py)
    metadata    a TopicRegistry snapshot, persisted to
                data_dir/registry.json and gossiped between brokers

Coordination is deliberately primitive: the live broker with the lowest
id acts as controller.  Liveness is judged by the receiver (a broker is
live if we heard from it recently), the controller reassigns leadership
for partitions whose leader went quiet, and every metadata change is
pushed as a full registry snapshot which receivers adopt only if
strictly newer.  Snapshot versions are (topic count, sum of epochs), so
every leadership change makes the registry strictly newer.  This trades
away split-brain tolerance (a partitioned minority keeps serving reads
of already-committed data) for having no consensus dependency; the
deployments this targets are 1-5 boxes in the same rack.

All state lives on the loop thread.  Socket readers and the HTTP shell
post closures onto the loop rather than touching the node directly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import record, wire
from .commitlog import LogConfig, PartitionLog
from .errors import (
    BadRequest,
    BrokerUnavailable,
    DataDirLocked,
    EdgebusError,
    MessageTooLarge,
    NotLeader,
    RequestTimeout,
)
from .replication import PartitionReplica, ReplicationConfig
from .stats import ActivityStats
from .topics import TopicConfig, TopicRegistry

PEER_REQUEST_TIMEOUT_MS = 5000.0
MAX_FETCH_BYTES = 8 << 20  # responses must fit a wire frame with headroom


@dataclass
class BrokerConfig:
    broker_id: int
    data_dir: str
    client_listen: str
    peer_listen: str
    # (broker_id, peer_addr, client_addr) for every other cluster member
    peers: list[tuple[int, str, str]] = field(default_factory=list)
    heartbeat_interval_ms: float = 1000.0
    liveness_timeout_ms: float | None = None  # default: 3 heartbeats
    retention_check_interval_ms: float = 30_000.0
    max_record_bytes: int = 1 << 20
    segment_max_bytes: int = 16 << 20
    index_interval_bytes: int = 4096
    default_retention_ms: int = 86_400_000
    max_lag_ms: float = 10_000.0
    produce_park_timeout_ms: float = 10_000.0

    def validate(self) -> "BrokerConfig":
        if self.broker_id < 0:
            raise BadRequest("broker_id must be >= 0")
        ids = [p[0] for p in self.peers]
        if self.broker_id in ids or len(set(ids)) != len(ids):
            raise BadRequest("duplicate broker id in peers")
        return self

    @property
    def liveness_ms(self) -> float:
        return self.liveness_timeout_ms or 3 * self.heartbeat_interval_ms

    def to_dict(self) -> dict:
        return {
            "broker_id": self.broker_id,
            "data_dir": self.data_dir,
            "client_listen": self.client_listen,
            "peer_listen": self.peer_listen,
            "peers": [list(p) for p in self.peers],
            "heartbeat_interval_ms": self.heartbeat_interval_ms,
            "liveness_timeout_ms": self.liveness_timeout_ms,
            "retention_check_interval_ms": self.retention_check_interval_ms,
            "max_record_bytes": self.max_record_bytes,
            "segment_max_bytes": self.segment_max_bytes,
            "index_interval_bytes": self.index_interval_bytes,
            "default_retention_ms": self.default_retention_ms,
            "max_lag_ms": self.max_lag_ms,
            "produce_park_timeout_ms": self.produce_park_timeout_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BrokerConfig":
        known = {f: d[f] for f in d if f in cls.__dataclass_fields__}
        known["peers"] = [tuple(p) for p in d.get("peers", [])]
        return cls(**known).validate()

    @classmethod
    def from_file(cls, path: str | Path) -> "BrokerConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


class _ReplyToken:
    __slots__ = ("channel", "corr_id", "kind", "topic", "partition",
                 "count", "nbytes", "t0_ms")

    def __init__(self, channel, corr_id, kind, topic="", partition=-1,
                 count=0, nbytes=0, t0_ms=0.0):
        self.channel = channel
        self.corr_id = corr_id
        self.kind = kind
        self.topic = topic
        self.partition = partition
        self.count = count
        self.nbytes = nbytes
        self.t0_ms = t0_ms


class _PendingPeer:
    __slots__ = ("callback", "timer")

    def __init__(self, callback, timer):
        self.callback = callback
        self.timer = timer


class BrokerNode:
    def __init__(self, config: BrokerConfig, loop, network):
        self.cfg = config.validate()
        self.loop = loop
        self.network = network
        self.broker_id = config.broker_id
        self.data_dir = Path(config.data_dir)

        self.cluster_ids = sorted([config.broker_id] + [p[0] for p in config.peers])
        self._peer_addrs = {p[0]: p[1] for p in config.peers}
        self._client_addrs = {p[0]: p[2] for p in config.peers}
        self._client_addrs[config.broker_id] = config.client_listen

        self.registry: TopicRegistry | None = None
        self.replicas: dict[tuple[str, int], PartitionReplica] = {}
        self.stats = ActivityStats()

        self._client_listener = None
        self._peer_listener = None
        self._client_channels: set = set()
        self._peer_in_channels: set = set()
        self._peer_channels: dict[int, object] = {}
        self._peer_pending: dict[int, dict[int, _PendingPeer]] = {}
        self._peer_corr = 0

        self.last_seen: dict[int, float] = {}
        self._reported_isr: dict[tuple[str, int], tuple[int, list[int]]] = {}
        self._tick_timer = None
        self._retention_timer = None
        self._refresh_inflight = False
        self._lock_fd = None
        self.running = False

    # -- lifecycle -------------------------------------------------------

    def start(self):
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._acquire_lock()
        self.registry = TopicRegistry(self.data_dir / "registry.json")
        self._sync_replicas()

        self._client_listener = self.network.listen(
            self.cfg.client_listen, self._on_client_accept)
        self._peer_listener = self.network.listen(
            self.cfg.peer_listen, self._on_peer_accept)

        # peers get a grace period before being judged dead, so a cluster
        # booting one broker at a time does not thrash leadership
        now = self.loop.now_ms()
        for pid in self._peer_addrs:
            self.last_seen[pid] = now

        self.running = True
        self._schedule_tick()
        self._schedule_retention()

    def stop(self, abrupt: bool = False):
        """Graceful stop persists replica state; abrupt mimics a crash."""
        self.running = False
        if self._tick_timer is not None:
            self._tick_timer.cancel()
        if self._retention_timer is not None:
            self._retention_timer.cancel()
        for listener in (self._client_listener, self._peer_listener):
            if listener is not None:
                listener.close()
        for replica in self.replicas.values():
            if abrupt:
                replica.halt()
            else:
                replica.stop()
            replica.log.close()
        for pending in self._peer_pending.values():
            for p in pending.values():
                p.timer.cancel()
        self._peer_pending.clear()
        for ch in list(self._client_channels) + list(self._peer_in_channels):
            ch.abort() if abrupt else ch.close()
        for ch in self._peer_channels.values():
            ch.abort() if abrupt else ch.close()
        self._peer_channels.clear()
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None

    def _acquire_lock(self):
        import fcntl
        path = self.data_dir / ".lock"
        fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise DataDirLocked(f"{self.data_dir} is in use by another broker") from None
        os.ftruncate(fd, 0)
        os.write(fd, str(os.getpid()).encode())
        self._lock_fd = fd

    # -- replica management ------------------------------------------------

    def _partition_dir(self, topic: str, partition: int) -> Path:
        return self.data_dir / "topics" / topic / str(partition)

    def _sync_replicas(self):
        """Create logs/replicas for every partition assigned to this broker
        and push current leadership into them."""
        for name in self.registry.topic_names():
            meta = self.registry.lookup(name)
            for p, assigned in enumerate(meta.assignment):
                if self.broker_id not in assigned:
                    continue
                key = (name, p)
                if key not in self.replicas:
                    log_cfg = LogConfig(
                        retention_ms=meta.config.retention_ms,
                        segment_max_bytes=self.cfg.segment_max_bytes,
                        index_interval_bytes=self.cfg.index_interval_bytes,
                    )
                    log = PartitionLog(self._partition_dir(name, p), log_cfg)
                    repl_cfg = ReplicationConfig(
                        max_lag_ms=self.cfg.max_lag_ms,
                        produce_park_timeout_ms=self.cfg.produce_park_timeout_ms,
                    )
                    self.replicas[key] = PartitionReplica(
                        self, name, p, self._partition_dir(name, p),
                        assigned, log, repl_cfg)
                self.replicas[key].apply_registry(meta.leaders[p], meta.epochs[p])

    # -- replica host interface ---------------------------------------------

    def reply(self, token: _ReplyToken, payload: bytes):
        self._record_stats(token, payload, ok=True)
        try:
            token.channel.send(wire.MSG_ACK, token.corr_id, payload)
        except (OSError, ValueError):
            pass  # requester hung up; nothing to tell them

    def reply_error(self, token: _ReplyToken, err: EdgebusError):
        self._record_stats(token, None, ok=False)
        try:
            token.channel.send(wire.MSG_ACK, token.corr_id, wire.encode_error(err))
        except (OSError, ValueError):
            pass

    def _record_stats(self, token: _ReplyToken, payload: bytes | None, ok: bool):
        latency_us = max(0, int((self.loop.now_ms() - token.t0_ms) * 1000))
        now = int(self.loop.now_ms())
        if token.kind == "produce":
            self.stats.record_produce(token.topic, token.count, token.nbytes,
                                      latency_us, now, token.partition, ok)
        elif token.kind == "fetch":
            count = nbytes = 0
            if ok and payload is not None and len(payload) >= 29:
                count = int.from_bytes(payload[25:29], "big")
                nbytes = len(payload) - 29
            self.stats.record_fetch(token.topic, count, nbytes,
                                    latency_us, now, token.partition, ok)

    def peer_request(self, broker_id: int, msg_type: int, payload: bytes,
                     callback, timeout_ms: float = PEER_REQUEST_TIMEOUT_MS):
        """Send a request to a peer broker; callback(err, ok_body) runs on
        the loop thread exactly once."""
        try:
            channel = self._peer_channel(broker_id)
        except (EdgebusError, OSError) as e:
            err = BrokerUnavailable(str(e))
            self.loop.post(lambda: callback(err, None))
            return
        self._peer_corr += 1
        corr = self._peer_corr
        pending = self._peer_pending.setdefault(broker_id, {})

        def on_timeout():
            if corr in pending:
                del pending[corr]
                callback(RequestTimeout(f"peer {broker_id} did not respond"), None)
        timer = self.loop.call_later(timeout_ms, on_timeout)
        pending[corr] = _PendingPeer(callback, timer)
        try:
            channel.send(msg_type, corr, payload)
        except (OSError, ValueError) as e:
            if corr in pending:
                del pending[corr]
                timer.cancel()
                err = BrokerUnavailable(str(e))
                self.loop.post(lambda: callback(err, None))

    def _peer_channel(self, broker_id: int):
        ch = self._peer_channels.get(broker_id)
        if ch is not None and not ch.closed:
            return ch
        addr = self._peer_addrs.get(broker_id)
        if addr is None:
            raise BrokerUnavailable(f"unknown broker id {broker_id}")
        try:
            ch = self.network.connect(addr)
        except (ConnectionError, OSError, TimeoutError) as e:
            raise BrokerUnavailable(f"connect to broker {broker_id}: {e}") from None
        ch.set_handler(
            lambda _c, mt, cid, pl: self._on_peer_response(broker_id, mt, cid, pl),
            lambda _c: self._on_peer_channel_closed(broker_id, ch))
        self._peer_channels[broker_id] = ch
        return ch

    def _on_peer_response(self, broker_id: int, msg_type: int, corr: int,
                          payload: bytes):
        pending = self._peer_pending.get(broker_id, {})
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

    def _on_peer_channel_closed(self, broker_id: int, channel):
        if self._peer_channels.get(broker_id) is channel:
            del self._peer_channels[broker_id]
        pending = self._peer_pending.pop(broker_id, {})
        for p in pending.values():
            p.timer.cancel()
            p.callback(BrokerUnavailable(f"connection to broker {broker_id} lost"), None)

    def request_metadata_refresh(self):
        """Pull the registry from the controller; used when a replica finds
        out its view is stale (fenced fetch, moved leadership)."""
        if self._refresh_inflight or not self.running:
            return
        target = self._controller_id()
        if target == self.broker_id:
            return
        self._refresh_inflight = True
        payload = wire.encode_json({"op": "metadata"})

        def done(err, body):
            self._refresh_inflight = False
            if err is None:
                self._adopt_metadata_body(body)
        self.peer_request(target, wire.MSG_METADATA, payload, done)

    def _adopt_metadata_body(self, body: bytes):
        try:
            info = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return
        topics = info.get("topics")
        if isinstance(topics, list) and self.registry.adopt_snapshot(topics):
            self._sync_replicas()

    # -- liveness and the controller role -------------------------------------

    def _controller_id(self) -> int:
        return min(self._live_ids())

    def _live_ids(self) -> list[int]:
        now = self.loop.now_ms()
        live = [self.broker_id]
        live.extend(pid for pid, seen in self.last_seen.items()
                    if now - seen <= self.cfg.liveness_ms)
        return sorted(live)

    def _schedule_tick(self):
        self._tick_timer = self.loop.call_later(
            self.cfg.heartbeat_interval_ms, self._tick)

    def _tick(self):
        if not self.running:
            return
        try:
            self._send_heartbeats()
            if self._controller_id() == self.broker_id:
                self._controller_scan()
            now = self.loop.now_ms()
            for replica in self.replicas.values():
                replica.tick(now)
        finally:
            self._schedule_tick()

    def _heartbeat_body(self) -> dict:
        led = {}
        for (topic, p), replica in self.replicas.items():
            if replica.is_leader:
                led[f"{topic}/{p}"] = {"isr": sorted(replica.isr),
                                       "epoch": replica.epoch}
        return {"id": self.broker_id, "version": list(self.registry.version()),
                "led": led}

    def _send_heartbeats(self):
        payload = wire.encode_json(self._heartbeat_body())
        for pid in self._peer_addrs:
            # replies also refresh last_seen, so a one-way network fault
            # still counts the peer as dead
            self.peer_request(pid, wire.MSG_HEARTBEAT, payload,
                              lambda err, body, pid=pid: self._on_heartbeat_reply(pid, err))

    def _on_heartbeat_reply(self, pid: int, err):
        if err is None:
            self.last_seen[pid] = self.loop.now_ms()

    def _controller_scan(self):
        """Reassign leadership for partitions whose leader went quiet."""
        live = set(self._live_ids())
        changed = False
        for name in self.registry.topic_names():
            meta = self.registry.lookup(name)
            for p in range(meta.config.partition_count):
                leader = meta.leaders[p]
                if leader is not None and leader in live:
                    continue
                candidate = self._pick_leader(name, p, meta, live)
                if leader is None and candidate is None:
                    continue
                if candidate == leader:
                    continue
                self.registry.set_leader(name, p, candidate, meta.epochs[p] + 1)
                changed = True
        if changed:
            self._sync_replicas()
            self._broadcast_decree()

    def _pick_leader(self, name: str, p: int, meta, live: set) -> int | None:
        """First live assignment member still in the in-sync set, in
        assignment order.  Without a fresh report, assume the full
        assignment was in sync."""
        assigned = meta.assignment[p]
        reported = self._reported_isr.get((name, p))
        isr = set(assigned)
        if reported is not None and reported[0] >= meta.epochs[p]:
            isr = set(reported[1])
        for b in assigned:
            if b in live and b in isr:
                return b
        return None

    def _broadcast_decree(self):
        payload = wire.encode_json({"topics": self.registry.to_snapshot()})
        live = set(self._live_ids())
        for pid in self._peer_addrs:
            if pid in live:
                self.peer_request(pid, wire.MSG_DECREE, payload,
                                  lambda err, body: None)

    def _schedule_retention(self):
        self._retention_timer = self.loop.call_later(
            self.cfg.retention_check_interval_ms, self._retention_pass)

    def _retention_pass(self):
        if not self.running:
            return
        try:
            now = int(self.loop.now_ms())
            for replica in self.replicas.values():
                replica.log.enforce_retention(now)
        finally:
            self._schedule_retention()

    # -- inbound connections ---------------------------------------------------

    def _on_client_accept(self, channel):
        self._client_channels.add(channel)
        self.stats.client_connected()
        channel.set_handler(
            lambda ch, mt, cid, pl: self._on_request(ch, mt, cid, pl),
            lambda ch: self._on_client_closed(ch))

    def _on_client_closed(self, channel):
        if channel in self._client_channels:
            self._client_channels.discard(channel)
            self.stats.client_disconnected()

    def _on_peer_accept(self, channel):
        self._peer_in_channels.add(channel)
        channel.set_handler(
            lambda ch, mt, cid, pl: self._on_request(ch, mt, cid, pl),
            lambda ch: self._peer_in_channels.discard(ch))

    # -- request dispatch --------------------------------------------------------

    def _on_request(self, channel, msg_type: int, corr_id: int, payload: bytes):
        token = _ReplyToken(channel, corr_id, "other", t0_ms=self.loop.now_ms())
        try:
            if msg_type == wire.MSG_PRODUCE:
                self._handle_produce(token, payload)
            elif msg_type == wire.MSG_FETCH:
                self._handle_fetch(token, payload)
            elif msg_type == wire.MSG_HEARTBEAT:
                self._handle_heartbeat(token, payload)
            elif msg_type == wire.MSG_METADATA:
                self._handle_metadata(token, payload)
            elif msg_type == wire.MSG_DECREE:
                self._handle_decree(token, payload)
            else:
                raise BadRequest(f"unexpected message type {msg_type}")
        except EdgebusError as e:
            self.reply_error(token, e)
        except Exception as e:  # keep serving other clients
            self.reply_error(token, EdgebusError(f"{type(e).__name__}: {e}"))

    def _replica_for(self, topic: str, partition: int) -> PartitionReplica:
        meta, assigned, leader, epoch = self.registry.partition_meta(topic, partition)
        replica = self.replicas.get((topic, partition))
        if replica is None:
            raise NotLeader("partition is not hosted here", topic=topic,
                            partition=partition, leader=leader, epoch=epoch)
        return replica

    def _handle_produce(self, token: _ReplyToken, payload: bytes):
        topic, partition, ack_mode, count, frames = wire.decode_produce(payload)
        token.kind = "produce"
        token.topic = topic
        token.partition = partition
        token.count = count
        token.nbytes = len(frames)
        if partition < 0:
            raise BadRequest("partition must be explicit; key routing is "
                             "done by the producing client")
        if count < 1:
            raise BadRequest("empty produce batch")
        largest = record.validate_frames(frames, count)
        if largest > self.cfg.max_record_bytes:
            raise MessageTooLarge(
                f"record of {largest} bytes exceeds limit {self.cfg.max_record_bytes}")
        replica = self._replica_for(topic, partition)
        replica.handle_produce(token, frames, count, ack_mode)

    def _handle_fetch(self, token: _ReplyToken, payload: bytes):
        req = wire.decode_fetch(payload)
        token.kind = "fetch"
        token.topic = req["topic"]
        token.partition = req["partition"]
        req["max_bytes"] = min(req["max_bytes"], MAX_FETCH_BYTES)
        replica = self._replica_for(req["topic"], req["partition"])
        if req["follower_id"] is not None:
            self.last_seen[req["follower_id"]] = self.loop.now_ms()
        replica.handle_fetch(token, req)

    def _handle_heartbeat(self, token: _ReplyToken, payload: bytes):
        body = wire.decode_json(payload)
        sender = body.get("id")
        if isinstance(sender, int):
            self.last_seen[sender] = self.loop.now_ms()
        for key, info in body.get("led", {}).items():
            topic, _, p = key.rpartition("/")
            self._reported_isr[(topic, int(p))] = (info["epoch"], info["isr"])
        their_version = tuple(body.get("version", (0, 0)))
        mine = self.registry.version()
        if their_version > mine and isinstance(sender, int):
            # they know something we don't; pull it
            self._pull_registry_from(sender)
        elif their_version < mine and self._controller_id() == self.broker_id:
            self._send_decree_to(sender)
        self.reply(token, wire.encode_json_ok({"id": self.broker_id}))

    def _pull_registry_from(self, sender: int):
        if self._refresh_inflight:
            return
        self._refresh_inflight = True

        def done(err, body):
            self._refresh_inflight = False
            if err is None:
                self._adopt_metadata_body(body)
        self.peer_request(sender, wire.MSG_METADATA,
                          wire.encode_json({"op": "metadata"}), done)

    def _send_decree_to(self, broker_id: int):
        payload = wire.encode_json({"topics": self.registry.to_snapshot()})
        self.peer_request(broker_id, wire.MSG_DECREE, payload,
                          lambda err, body: None)

    def _handle_decree(self, token: _ReplyToken, payload: bytes):
        body = wire.decode_json(payload)
        adopted = self.registry.adopt_snapshot(body["topics"])
        if adopted:
            self._sync_replicas()
        self.reply(token, wire.encode_json_ok({"adopted": adopted}))

    def _handle_metadata(self, token: _ReplyToken, payload: bytes):
        body = wire.decode_json(payload)
        op = body.get("op", "metadata")
        if op == "metadata":
            self.reply(token, wire.encode_json_ok(self._metadata_body()))
        elif op == "create_topic":
            self._handle_create_topic(token, body)
        elif op == "stats":
            snap = self.stats.snapshot(topic=body.get("topic"),
                                       since_ms=body.get("since_ms"))
            snap["broker_id"] = self.broker_id
            snap["controller"] = self._controller_id()
            self.reply(token, wire.encode_json_ok(snap))
        elif op == "describe":
            self._handle_describe(token, body)
        else:
            raise BadRequest(f"unknown metadata op {op!r}")

    def _metadata_body(self) -> dict:
        return {
            "controller": self._controller_id(),
            "brokers": {str(b): self._client_addrs.get(b) for b in self.cluster_ids},
            "topics": self.registry.to_snapshot(),
        }

    def _handle_create_topic(self, token: _ReplyToken, body: dict):
        if self._controller_id() != self.broker_id:
            # only the controller mutates the registry; relay for the client
            def done(err, ok_body):
                if err is not None:
                    self.reply_error(token, err)
                else:
                    self.reply(token, b"\x00" + ok_body)
            self.peer_request(self._controller_id(), wire.MSG_METADATA,
                              wire.encode_json(body), done)
            return
        config = TopicConfig(
            name=body["name"],
            partition_count=int(body.get("partitions", 1)),
            replication_factor=int(body.get("replication_factor", 1)),
            retention_ms=int(body.get("retention_ms", self.cfg.default_retention_ms)),
        )
        meta = self.registry.create(config, self.cluster_ids)
        self._sync_replicas()
        self._broadcast_decree()
        self.reply(token, wire.encode_json_ok(meta.to_dict()))

    def _handle_describe(self, token: _ReplyToken, body: dict):
        name = body.get("topic")
        if not name:
            raise BadRequest("describe needs a topic")
        meta = self.registry.lookup(name)
        parts = []
        for p in range(meta.config.partition_count):
            replica = self.replicas.get((name, p))
            parts.append(replica.describe() if replica is not None else {
                "topic": name, "partition": p, "leader": meta.leaders[p],
                "epoch": meta.epochs[p], "hosted": False,
            })
        self.reply(token, wire.encode_json_ok(
            {"topic": meta.to_dict(), "partitions": parts}))
