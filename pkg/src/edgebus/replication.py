"""Per-partition replication: leader appends, followers fetch, commit at
the high watermark.

One PartitionReplica instance exists on every broker that hosts a copy
of a partition.  The same object plays either role, switching when the
registry (driven by the controller) assigns a new leader:

    leader    appends produce batches, tracks follower fetch positions,
              advances high_watermark = min(log end over the in-sync
              set), parks all_isr produces until their offsets commit,
              evicts followers that stop keeping up, parks long-poll
              fetches
    follower  runs a fetch loop against the leader, appends the raw
              frame bytes it receives (offsets are positional, so bytes
              land identically), learns the high watermark from fetch
              piggybacks, and on leadership changes truncates to its
              last known committed point before refetching

The committed point is persisted (debounced) per partition so a restart
never serves uncommitted data as committed: a restarting leader resumes
from persisted hw and grows it as followers report back, never by fiat.
Promotion is the one place hw jumps: a newly decreed leader owns
everything in its log (the controller only promotes in-sync replicas),
so hw := log end and the isr collapses to {self} until followers catch
back up.

The host (broker) supplies identity, timers, peer messaging and reply
delivery; everything here runs on the host's single loop thread.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from . import wire
from .commitlog import PartitionLog
from .errors import (
    EdgebusError,
    FencedEpoch,
    NotLeader,
    OffsetOutOfRange,
    RequestTimeout,
)

MAX_WAIT_MS = 30_000


@dataclass
class ReplicationConfig:
    max_lag_ms: float = 10_000.0
    produce_park_timeout_ms: float = 10_000.0
    follower_wait_ms: int = 500
    follower_fetch_bytes: int = 1 << 20
    hw_persist_interval_ms: float = 1000.0


class _ParkedProduce:
    __slots__ = ("required", "token", "offsets", "timer")

    def __init__(self, required, token, offsets, timer):
        self.required = required
        self.token = token
        self.offsets = offsets
        self.timer = timer


class _ParkedFetch:
    __slots__ = ("token", "req", "timer", "follower")

    def __init__(self, token, req, timer, follower):
        self.token = token
        self.req = req
        self.timer = timer
        self.follower = follower


class PartitionReplica:
    def __init__(self, host, topic: str, partition: int, directory: str | Path,
                 replicas: list[int], log: PartitionLog,
                 config: ReplicationConfig | None = None):
        self.host = host
        self.topic = topic
        self.partition = partition
        self.dir = Path(directory)
        self.replicas = list(replicas)
        self.log = log
        self.cfg = config or ReplicationConfig()

        self.leader_id: int | None = None
        self.epoch = -1  # below any real epoch so the first apply always runs
        self.is_leader = False

        # leader-side state
        self.isr: set[int] = set()
        self.follower_end: dict[int, int] = {}
        self.caught_up_at: dict[int, float] = {}
        self.hw = self._load_hw()
        self.epoch_start_offset = 0
        self._parked_produces: list[_ParkedProduce] = []
        self._parked_fetches: list[_ParkedFetch] = []

        # follower-side state
        self.local_hw = self.hw
        self._fetch_gen = 0
        self._fetch_timer = None
        self._fetch_inflight = False

        self._hw_dirty = False
        self._hw_timer = None
        self.stopped = False

    # -- committed-point persistence ----------------------------------

    def _hw_path(self) -> Path:
        return self.dir / "hw"

    def _load_hw(self) -> int:
        try:
            return int(self._hw_path().read_text().strip())
        except (FileNotFoundError, ValueError):
            return 0

    def _persist_hw_now(self):
        self._hw_dirty = False
        tmp = self._hw_path().with_suffix(".tmp")
        value = self.hw if self.is_leader else self.local_hw
        tmp.write_text(str(value))
        os.replace(tmp, self._hw_path())

    def _schedule_hw_persist(self):
        if self._hw_dirty or self.stopped:
            return
        self._hw_dirty = True

        def fire():
            self._hw_timer = None
            if not self.stopped and self._hw_dirty:
                self._persist_hw_now()
        self._hw_timer = self.host.loop.call_later(
            self.cfg.hw_persist_interval_ms, fire)

    # -- registry application ------------------------------------------

    def apply_registry(self, leader_id: int | None, epoch: int):
        """Adopt a (leader, epoch) decision.  Idempotent, epoch-ordered."""
        if epoch < self.epoch or (epoch == self.epoch and leader_id == self.leader_id):
            return
        was_leader = self.is_leader
        first = self.epoch < 0
        self.epoch = epoch
        self.leader_id = leader_id
        me = self.host.broker_id

        if leader_id == me:
            self.is_leader = True
            self._stop_fetch_loop()
            if first:
                # creation or clean restart: resume from the persisted
                # committed point and let follower fetches grow it
                self.isr = set(self.replicas)
                self.follower_end = {}
                now = self.host.loop.now_ms()
                self.caught_up_at = {b: now for b in self.replicas if b != me}
                self._recompute_hw()
            else:
                # promotion: everything local is the committed prefix now
                self.isr = {me}
                self.follower_end = {}
                self.caught_up_at = {}
                if self.log.next_offset > self.hw:
                    self.hw = self.log.next_offset
                    self._persist_hw_now()
                self._release_consumer_fetches()
        else:
            self.is_leader = False
            if was_leader:
                # demotion: my uncommitted tail belongs to a dead regime
                self.local_hw = self.hw
                self._fail_parked(NotLeader("leadership moved",
                                            leader=leader_id, epoch=epoch))
            # anything past the last known committed point may be a tail
            # the rest of the group never saw; drop it and refetch
            if self.log.next_offset > self.local_hw:
                self.log.truncate_to(self.local_hw)
            self._persist_hw_now()
            self._stop_fetch_loop()
            if leader_id is not None and me in self.replicas:
                self._start_fetch_loop()

    # -- leader: produce -------------------------------------------------

    def handle_produce(self, token, frames: bytes, count: int, ack_mode: int):
        if not self.is_leader:
            raise NotLeader("not the leader", topic=self.topic,
                            partition=self.partition, leader=self.leader_id,
                            epoch=self.epoch)
        base = self.log.append_encoded(frames, count)
        end = base + count
        offsets = [(self.partition, o) for o in range(base, end)]
        if self._recompute_hw():
            self._release_consumer_fetches()
        self._release_follower_fetches()
        if ack_mode == wire.ACK_LEADER_ONLY or self.hw >= end:
            self.host.reply(token, wire.encode_produce_ok(self.hw >= end, offsets))
            return
        parked = _ParkedProduce(end, token, offsets, None)
        parked.timer = self.host.loop.call_later(
            self.cfg.produce_park_timeout_ms,
            lambda: self._produce_timeout(parked))
        self._parked_produces.append(parked)

    def _produce_timeout(self, parked: _ParkedProduce):
        if parked in self._parked_produces:
            self._parked_produces.remove(parked)
            self.host.reply_error(parked.token, RequestTimeout(
                "replicas did not acknowledge in time; outcome indeterminate",
                topic=self.topic, partition=self.partition))

    # -- fetch (consumers and followers) ----------------------------------

    def handle_fetch(self, token, req: dict):
        if req["follower_id"] is not None:
            self._handle_follower_fetch(token, req)
        else:
            self._handle_consumer_fetch(token, req)

    def _handle_follower_fetch(self, token, req: dict):
        if not self.is_leader:
            raise NotLeader("not the leader", topic=self.topic,
                            partition=self.partition, leader=self.leader_id,
                            epoch=self.epoch)
        if req["epoch"] != self.epoch:
            raise FencedEpoch(f"fetch epoch {req['epoch']}, current {self.epoch}",
                              topic=self.topic, partition=self.partition,
                              epoch=self.epoch)
        fid = req["follower_id"]
        now = self.host.loop.now_ms()
        from_offset = req["from_offset"]
        log_end = self.log.next_offset
        # from_offset IS the follower's log end; trust the latest report,
        # a lower one means it truncated or reset
        self.follower_end[fid] = from_offset
        if from_offset >= log_end:
            self.caught_up_at[fid] = now
            if fid not in self.isr and fid in self.replicas:
                self.isr.add(fid)
        if self._recompute_hw():
            self._release_parked_produces()
            self._release_consumer_fetches()
        if from_offset > log_end:
            # follower carries a tail from a dead regime; an empty reply
            # with our log end tells it to truncate
            self.host.reply(token, wire.encode_fetch_ok(
                self.hw, self.log.earliest_offset, log_end, 0, b""))
            return
        if from_offset == log_end and req["wait_ms"] > 0:
            self._park_fetch(token, req, follower=True)
            return
        self._serve_fetch(token, req, bound=None)

    def _handle_consumer_fetch(self, token, req: dict):
        bound = self.hw if self.is_leader else min(self.local_hw,
                                                   self.log.next_offset)
        from_offset = req["from_offset"]
        log_end = self.log.next_offset
        if from_offset > log_end:
            raise OffsetOutOfRange(
                f"offset {from_offset} beyond log end {log_end}",
                earliest_offset=self.log.earliest_offset, next_offset=log_end)
        if from_offset >= bound and req["wait_ms"] > 0:
            self._park_fetch(token, req, follower=False)
            return
        self._serve_fetch(token, req, bound=bound)

    def _park_fetch(self, token, req, follower: bool):
        wait = min(req["wait_ms"], MAX_WAIT_MS)
        parked = _ParkedFetch(token, req, None, follower)
        parked.timer = self.host.loop.call_later(
            wait, lambda: self._fetch_timeout(parked))
        self._parked_fetches.append(parked)

    def _fetch_timeout(self, parked: _ParkedFetch):
        if parked in self._parked_fetches:
            self._parked_fetches.remove(parked)
            self._serve_parked(parked)

    def _serve_parked(self, parked: _ParkedFetch):
        try:
            bound = None
            if not parked.follower:
                bound = self.hw if self.is_leader else min(self.local_hw,
                                                           self.log.next_offset)
            self._serve_fetch(parked.token, parked.req, bound)
        except EdgebusError as e:
            self.host.reply_error(parked.token, e)

    def _serve_fetch(self, token, req: dict, bound: int | None):
        max_records = req["max_records"] or None
        first, count, frames = self.log.read_raw(
            req["from_offset"], req["max_bytes"], end_offset=bound,
            max_records=max_records)
        hw = self.hw if self.is_leader else self.local_hw
        self.host.reply(token, wire.encode_fetch_ok(
            hw, self.log.earliest_offset, self.log.next_offset, count, frames))

    def _release_follower_fetches(self):
        """New data: wake parked follower fetches."""
        if not self._parked_fetches:
            return
        ready = [p for p in self._parked_fetches if p.follower]
        for p in ready:
            self._parked_fetches.remove(p)
            p.timer.cancel()
            self._serve_parked(p)

    def _release_consumer_fetches(self):
        bound = self.hw if self.is_leader else self.local_hw
        ready = [p for p in self._parked_fetches
                 if not p.follower and p.req["from_offset"] < bound]
        for p in ready:
            self._parked_fetches.remove(p)
            p.timer.cancel()
            self._serve_parked(p)

    # -- leader: commit bookkeeping ---------------------------------------

    def _recompute_hw(self) -> bool:
        """Returns True when the high watermark advanced."""
        if not self.is_leader:
            return False
        me = self.host.broker_id
        ends = [self.log.next_offset]
        ends.extend(self.follower_end.get(b, 0) for b in self.isr if b != me)
        new_hw = min(ends)
        if new_hw > self.hw:
            self.hw = new_hw
            self._schedule_hw_persist()
            return True
        return False

    def _release_parked_produces(self):
        done = [p for p in self._parked_produces if p.required <= self.hw]
        for p in done:
            self._parked_produces.remove(p)
            p.timer.cancel()
            self.host.reply(p.token, wire.encode_produce_ok(True, p.offsets))

    def _fail_parked(self, err: EdgebusError):
        produces, self._parked_produces = self._parked_produces, []
        for p in produces:
            p.timer.cancel()
            self.host.reply_error(p.token, err)
        fetches, self._parked_fetches = self._parked_fetches, []
        for p in fetches:
            p.timer.cancel()
            if p.follower:
                self.host.reply_error(p.token, err)
            else:
                self._serve_parked(p)

    def tick(self, now_ms: float):
        """Periodic upkeep: evict followers that stopped keeping up."""
        if not self.is_leader:
            return
        me = self.host.broker_id
        evicted = False
        for b in list(self.isr):
            if b == me:
                continue
            seen = self.caught_up_at.get(b, 0.0)
            if now_ms - seen > self.cfg.max_lag_ms:
                self.isr.discard(b)
                evicted = True
        if evicted and self._recompute_hw():
            self._release_parked_produces()
            self._release_consumer_fetches()

    # -- follower: fetch loop ---------------------------------------------

    def _start_fetch_loop(self):
        self._fetch_gen += 1
        self._fetch_inflight = False
        gen = self._fetch_gen
        self._fetch_timer = self.host.loop.call_later(
            0, lambda: self._fetch_once(gen))

    def _stop_fetch_loop(self):
        self._fetch_gen += 1
        if self._fetch_timer is not None:
            self._fetch_timer.cancel()
            self._fetch_timer = None

    def _fetch_once(self, gen: int):
        if gen != self._fetch_gen or self.stopped or self.leader_id is None:
            return
        if self._fetch_inflight:
            return
        self._fetch_inflight = True
        payload = wire.encode_fetch(
            self.topic, self.partition, self.log.next_offset,
            self.cfg.follower_fetch_bytes, wait_ms=self.cfg.follower_wait_ms,
            follower_id=self.host.broker_id, epoch=self.epoch)
        self.host.peer_request(
            self.leader_id, wire.MSG_FETCH, payload,
            lambda err, body: self._on_fetch_response(gen, err, body))

    def _on_fetch_response(self, gen: int, err, body):
        if gen != self._fetch_gen or self.stopped:
            return
        self._fetch_inflight = False
        if err is not None:
            if isinstance(err, (NotLeader, FencedEpoch)):
                self.host.request_metadata_refresh()
            elif isinstance(err, OffsetOutOfRange):
                # the leader purged past our position: abandon the local
                # copy and rebootstrap from its earliest offset
                earliest = err.extra.get("earliest_offset", 0)
                if earliest > self.log.next_offset:
                    self.log.reset_to(earliest)
                    self.local_hw = max(self.local_hw, earliest)
            self._reschedule_fetch(gen, 500.0)
            return
        hw, earliest, leader_end, count, frames = wire.decode_fetch_ok(body)
        if leader_end < self.log.next_offset:
            self.log.truncate_to(leader_end)
        if count:
            self.log.append_encoded(frames, count)
        if hw > self.local_hw:
            self.local_hw = min(hw, self.log.next_offset)
            self._schedule_hw_persist()
            self._release_consumer_fetches()
        # the leader long-polls on our behalf, so refetch immediately
        self._reschedule_fetch(gen, 0.0)

    def _reschedule_fetch(self, gen: int, delay_ms: float):
        if gen != self._fetch_gen or self.stopped:
            return
        self._fetch_timer = self.host.loop.call_later(
            delay_ms, lambda: self._fetch_once(gen))

    # -- lifecycle ----------------------------------------------------------

    def stop(self):
        self.halt()
        self._persist_hw_now()

    def halt(self):
        """Tear down timers without persisting anything, like a crash."""
        self.stopped = True
        self._stop_fetch_loop()
        for p in self._parked_produces:
            p.timer.cancel()
        for p in self._parked_fetches:
            p.timer.cancel()
        self._parked_produces = []
        self._parked_fetches = []
        if self._hw_timer is not None:
            self._hw_timer.cancel()
            self._hw_timer = None

    def describe(self) -> dict:
        return {
            "topic": self.topic,
            "partition": self.partition,
            "leader": self.leader_id,
            "epoch": self.epoch,
            "is_leader": self.is_leader,
            "isr": sorted(self.isr) if self.is_leader else None,
            "high_watermark": self.hw if self.is_leader else self.local_hw,
            "log_end": self.log.next_offset,
            "earliest": self.log.earliest_offset,
        }
