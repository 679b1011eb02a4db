"""One simulated run of the full stack on a three-tier topology.

The harness builds real brokers, a real gateway, and a real sink, wires
them over the simulated network, and drives a crowd-sensing workload
against the gateway's HTTP surface.  Every message carries a run-unique
id in its attributes; the harness keeps a ledger of those ids and, at
the end of the run, accounts for every one of them exactly once across
stored / dead-lettered / purged / in-flight.  The report is a pure
function of (topology, workload, duration, scenario, seed).
"""

import hashlib
import json
import shutil
import tempfile
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .. import wire
from ..broker import BrokerConfig, BrokerNode
from ..client import BrokerClient
from ..errors import ConfigError, EdgebusError, ScenarioError
from ..gateway import (GatewayConfig, GatewayCore, SimGateway, pseudonymize,
                       sim_http_request)
from ..sim import SimLoop, SimNetwork
from ..sink import SinkConfig, SinkCore
from ..tsstore import TsStore
from .config import ScenarioEvent, TopologyConfig, WorkloadSpec, parse_scenario
from .report import REPORT_VERSION, latency_summary
from .workload import schedule

TOPIC = "measurements"
GATEWAY_ADDR = "gw:8080"

# broker tuning for desk-scale runs: small segments so retention can
# actually purge within a short horizon, frequent retention sweeps
SEGMENT_BYTES = 64 * 1024
RETENTION_SWEEP_MS = 500.0
SETUP_TIMEOUT_MS = 15_000.0
DRAIN_POLL_MS = 100.0


@dataclass
class LedgerEntry:
    """Everything known about one posted message."""

    mid: str
    device_index: int
    series: str
    ts_ms: int
    value: float
    post_t: float
    ack_t: float | None = None
    status: int | None = None
    partition: int | None = None
    offset: int | None = None
    stored_t: float | None = None


class _Device:
    """One simulated mobile device: a lazy channel to the gateway and a
    map of outstanding request ids."""

    def __init__(self, sim: "Simulation", index: int, device_id: str):
        self.sim = sim
        self.index = index
        self.device_id = device_id
        self.pseudonym = pseudonymize(sim.secret, device_id)
        self.node = sim.net.node(f"dev{index}")
        self.channel = None
        self.pending: dict[int, str] = {}
        self._next_corr = 1

    def post(self, mid: str, body: dict):
        if self.channel is None or self.channel.closed:
            self.channel = self.node.connect(GATEWAY_ADDR)
            self.channel.set_handler(self._on_frame, self._on_close)
        corr = self._next_corr
        self._next_corr += 1
        self.pending[corr] = mid
        self.channel.send(wire.MSG_HTTP, corr,
                          sim_http_request("POST", "/v1/measurements",
                                           body=body))

    def _on_frame(self, _ch, _msg_type, corr_id, payload):
        mid = self.pending.pop(corr_id, None)
        if mid is not None:
            self.sim._on_device_reply(mid, payload)

    def _on_close(self, _ch):
        self.channel = None  # unanswered requests stay in the ledger


class Simulation:
    def __init__(self, topology: TopologyConfig, workload: WorkloadSpec,
                 duration_ms: float, scenario=None, *,
                 sink_rate_cap: float | None = None,
                 sink_enabled: bool = True,
                 base_dir=None,
                 drain_timeout_ms: float = 600_000.0):
        self.topology = topology.validate()
        self.workload = workload.validate()
        if duration_ms <= 0:
            raise ConfigError("duration_ms must be positive")
        workload.check_horizon(duration_ms)
        self.duration_ms = float(duration_ms)
        self.seed = topology.rng_seed
        self.sink_rate_cap = sink_rate_cap
        self.sink_enabled = sink_enabled
        self.drain_timeout_ms = float(drain_timeout_ms)

        if scenario is None:
            scenario = []
        if scenario and not isinstance(scenario[0], ScenarioEvent):
            scenario = parse_scenario(list(scenario))
        self.scenario = list(scenario)
        for ev in self.scenario:
            if ev.broker is not None and not (
                    1 <= ev.broker <= topology.broker_count):
                raise ScenarioError(
                    f"scenario references unknown broker {ev.broker}")

        self._own_dir = base_dir is None
        if self._own_dir:
            self.base_dir = Path(tempfile.mkdtemp(prefix="edgebus-run-"))
        else:
            self.base_dir = Path(base_dir)
            self.base_dir.mkdir(parents=True, exist_ok=True)
            if any(self.base_dir.iterdir()):
                raise ConfigError("run directory must be empty")
        self.store_dir = self.base_dir / "store"

        self.loop = SimLoop()
        self.net = SimNetwork(self.loop, seed=self.seed)
        self.secret = hashlib.sha256(
            f"edgebus-harness:{self.seed}".encode()).digest()

        self.ledger: dict[str, LedgerEntry] = {}
        self._by_content: dict[tuple, LedgerEntry] = {}
        self._pending_acks = 0
        self.ack_samples: list[float] = []
        self.e2e_samples: list[float] = []
        self.backlog_samples: list[list] = []
        self.events_applied: list[dict] = []
        self._last_hw: dict[tuple[str, int], int] = {}
        self._finished = False
        self.drained_at: float | None = None

        self.brokers: dict[int, BrokerNode] = {}
        self._broker_cfgs: dict[int, BrokerConfig] = {}
        self.gateway_core = None
        self.gateway = None
        self.sink = None
        self._admin = None
        self._sites_by_tier = {}

    # -- world construction ---------------------------------------------

    def _build_world(self):
        topo = self.topology
        gw_tier = topo.tier_of("gateway")
        broker_tier = topo.tier_of("broker")
        sink_tier = topo.tier_of("sink")
        self.ingest_path = f"via_{gw_tier}"

        broker_sites = [f"broker{i}" for i in range(1, topo.broker_count + 1)]
        dev_sites = [f"dev{i}" for i in range(self.workload.device_count)]
        tiers = {"device": list(dev_sites)}
        tiers.setdefault(gw_tier, []).append("gw")
        tiers.setdefault(broker_tier, []).extend(broker_sites)
        tiers.setdefault(sink_tier, []).append("sink")
        self._sites_by_tier = tiers

        dev_gw = topo.link_between("device", gw_tier)
        for site in dev_sites:
            self.net.set_link(site, "gw", dev_gw.to_params())
        gw_broker = topo.link_between(gw_tier, broker_tier)
        sink_broker = topo.link_between(sink_tier, broker_tier)
        for site in broker_sites:
            if gw_broker is not None:
                self.net.set_link("gw", site, gw_broker.to_params())
            if sink_broker is not None:
                self.net.set_link("sink", site, sink_broker.to_params())

        client_addrs = {i: f"broker{i}:9092"
                        for i in range(1, topo.broker_count + 1)}
        peer_addrs = {i: f"broker{i}:9093"
                      for i in range(1, topo.broker_count + 1)}
        for i in range(1, topo.broker_count + 1):
            peers = [(j, peer_addrs[j], client_addrs[j])
                     for j in client_addrs if j != i]
            cfg = BrokerConfig(
                broker_id=i,
                data_dir=str(self.base_dir / f"broker{i}"),
                client_listen=client_addrs[i],
                peer_listen=peer_addrs[i],
                peers=peers,
                segment_max_bytes=SEGMENT_BYTES,
                retention_check_interval_ms=RETENTION_SWEEP_MS,
                default_retention_ms=topo.retention_ms)
            self._broker_cfgs[i] = cfg
            node = BrokerNode(cfg, self.loop, self.net.node(f"broker{i}"))
            node.start()
            self.brokers[i] = node
        self.bootstrap = sorted(client_addrs.values())

        gw_cfg = GatewayConfig(listen=GATEWAY_ADDR, bootstrap=self.bootstrap,
                               secret=self.secret, default_topic=TOPIC)
        self.gateway_core = GatewayCore(self.loop, self.net.node("gw"), gw_cfg)
        self.gateway = SimGateway(self.gateway_core, self.net.node("gw"),
                                  GATEWAY_ADDR)

        self._admin = BrokerClient(self.loop, self.net.node("gw"),
                                   self.bootstrap)
        self._create_topic()
        if self.sink_enabled:
            self._start_sink()

        self.devices = [
            _Device(self, i, self.workload.device_id(i))
            for i in range(self.workload.device_count)]

    def _create_topic(self):
        """Retries until the cluster forms; a run cannot start without
        its topic."""
        deadline = self.loop.now_ms() + SETUP_TIMEOUT_MS
        state = {"done": False, "err": None}

        def attempt():
            self._admin.create_topic(
                TOPIC, self.topology.partitions,
                self.topology.replication_factor,
                self.topology.retention_ms, on_done)

        def on_done(err, _res):
            if err is None:
                state["done"] = True
            else:
                state["err"] = err
                if self.loop.now_ms() < deadline:
                    self.loop.call_later(100.0, attempt)

        attempt()
        while not state["done"] and self.loop.now_ms() < deadline:
            self.loop.run_until(self.loop.now_ms() + 5.0)
        if not state["done"]:
            raise ConfigError(f"could not create run topic: {state['err']}")

    def _start_sink(self):
        cfg = SinkConfig(store_dir=str(self.store_dir), topics=[TOPIC],
                         rate_limit_per_s=self.sink_rate_cap)
        self.sink = SinkCore(self.loop, self.net.node("sink"),
                             self.bootstrap, cfg)
        self.sink.on_batch = self._on_stored
        self.sink.start()

    # -- workload ---------------------------------------------------------

    def _schedule_workload(self):
        self._posts = deque(schedule(self.workload, self.duration_ms,
                                     self.seed))
        if self._posts:
            delay = max(0.0, self._posts[0].t_ms - self.loop.now_ms())
            self.loop.call_later(delay, self._pump_posts)

    def _pump_posts(self):
        now = self.loop.now_ms()
        while self._posts and self._posts[0].t_ms <= now:
            self._do_post(self._posts.popleft())
        if self._posts:
            self.loop.call_later(self._posts[0].t_ms - now, self._pump_posts)

    def _do_post(self, post):
        dev = self.devices[post.device_index]
        now = self.loop.now_ms()
        ts = int(now)
        # value encodes (device, seq) exactly in a float, so every message
        # body is unique and the ledger can match stored points by content
        value = float(post.device_index * 1_000_000 + post.seq)
        mid = f"r{self.seed}-{post.device_index}-{post.seq}"
        entry = LedgerEntry(mid, post.device_index, post.series, ts, value,
                            now)
        self.ledger[mid] = entry
        self._by_content[(dev.pseudonym, ts, value)] = entry
        attrs = {"mid": mid}
        body = {"device_id": dev.device_id, "series": post.series,
                "timestamp_ms": ts, "value": value, "attributes": attrs}
        pad = self.workload.payload_bytes - len(json.dumps(body)) - 10
        if pad > 0:
            attrs["pad"] = "x" * pad
        self._pending_acks += 1
        dev.post(mid, body)

    def _on_device_reply(self, mid: str, payload: bytes):
        entry = self.ledger[mid]
        self._pending_acks -= 1
        entry.ack_t = self.loop.now_ms()
        try:
            obj = wire.decode_json(wire.split_response(payload))
        except EdgebusError:
            entry.status = 599  # transport-level failure at the gateway
            return
        entry.status = int(obj.get("status", 0))
        if entry.status == 202:
            body = obj.get("body") or {}
            entry.partition = body.get("partition")
            entry.offset = body.get("offset")
            self.ack_samples.append(entry.ack_t - entry.post_t)

    def _on_stored(self, _tp, records):
        """Sink observer: first durable sighting of a message closes its
        end-to-end latency measurement."""
        now = self.loop.now_ms()
        for rec in records:
            try:
                obj = json.loads(rec.value)
                key = (obj["device_pseudonym"], obj["timestamp_ms"],
                       obj["value"])
            except (ValueError, KeyError, TypeError):
                continue
            entry = self._by_content.get(key)
            if entry is not None and entry.stored_t is None:
                entry.stored_t = now
                self.e2e_samples.append(now - entry.post_t)

    # -- measurement -------------------------------------------------------

    def _hw(self, tp: tuple[str, int]) -> int:
        for node in self.brokers.values():
            if not node.running:
                continue
            replica = node.replicas.get(tp)
            if replica is not None and replica.is_leader:
                self._last_hw[tp] = replica.hw
                return replica.hw
        for node in self.brokers.values():
            if node.running and tp in node.replicas:
                hw = node.replicas[tp].hw
                self._last_hw[tp] = max(self._last_hw.get(tp, 0), hw)
                return self._last_hw[tp]
        return self._last_hw.get(tp, 0)

    def _earliest(self, tp: tuple[str, int]) -> int:
        out = 0
        for node in self.brokers.values():
            if node.running and tp in node.replicas:
                out = max(out, node.replicas[tp].log.earliest_offset)
        return out

    def _backlog(self) -> int:
        positions = self.sink.positions if self.sink is not None else {}
        total = 0
        for p in range(self.topology.partitions):
            tp = (TOPIC, p)
            total += max(0, self._hw(tp) - positions.get(tp, 0))
        return total

    def _sample(self):
        self.backlog_samples.append(
            [self.loop.now_ms(), self._backlog()])
        if not self._finished:
            now = self.loop.now_ms()
            next_tick = (int(now) // 1000 + 1) * 1000.0
            self._sampler = self.loop.call_later(next_tick - now, self._sample)

    # -- scenario ----------------------------------------------------------

    def _schedule_scenario(self):
        for ev in self.scenario:
            delay = max(0.0, ev.at_ms - self.loop.now_ms())
            self.loop.call_later(delay, lambda e=ev: self._apply_event(e))

    def _apply_event(self, ev: ScenarioEvent):
        applied = ev.to_dict()
        applied["at_ms"] = self.loop.now_ms()
        self.events_applied.append(applied)
        if ev.action == "kill_broker":
            node = self.brokers[ev.broker]
            if node.running:
                node.stop(abrupt=True)
        elif ev.action == "restart_broker":
            node = self.brokers[ev.broker]
            if not node.running:
                cfg = self._broker_cfgs[ev.broker]
                node = BrokerNode(cfg, self.loop,
                                  self.net.node(f"broker{ev.broker}"))
                node.start()
                self.brokers[ev.broker] = node
        elif ev.action in ("partition_link", "heal_link"):
            blocked = ev.action == "partition_link"
            tier_a, tier_b = ev.between
            for a in self._sites_by_tier.get(tier_a, []):
                for b in self._sites_by_tier.get(tier_b, []):
                    self.net.set_blocked(a, b, blocked)
        elif ev.action == "stop_sink":
            if self.sink is not None and not self.sink.stopped:
                self.sink.stop()
        elif ev.action == "start_sink":
            if self.sink is None or self.sink.stopped:
                self._start_sink()

    # -- run ---------------------------------------------------------------

    def run(self) -> dict:
        try:
            self._build_world()
            self._schedule_workload()
            self._schedule_scenario()
            self._sample()
            self.loop.run_until(self.duration_ms)
            self._drain_phase()
            self._finished = True
            # close the backlog series at the true final state; the
            # per-second sampler can miss the last stretch of the drain
            t = self.loop.now_ms()
            if not self.backlog_samples or self.backlog_samples[-1][0] != t:
                self.backlog_samples.append([t, self._backlog()])
            return self._build_report()
        finally:
            self._teardown()

    def _quiet(self) -> bool:
        if self._pending_acks > 0:
            return False
        if self.sink is None or self.sink.stopped:
            return True
        return self._backlog() == 0 and self.sink.drained

    def _drain_phase(self):
        cap = self.duration_ms + self.drain_timeout_ms
        while True:
            if self._quiet():
                self.drained_at = self.loop.now_ms()
                return
            if self.loop.now_ms() >= cap:
                return
            self.loop.run_until(min(cap, self.loop.now_ms() + DRAIN_POLL_MS))

    # -- accounting ----------------------------------------------------------

    def _content_counts(self) -> dict:
        counts: dict[tuple, int] = {}
        if not (self.store_dir / "meta.json").exists():
            return counts
        store = TsStore(self.store_dir, read_only=True)
        try:
            hi = int(self.loop.now_ms()) + 1
            for series in store.series_names():
                for p in store.query_range(series, 0, hi):
                    key = (p.device_pseudonym, p.timestamp_ms, p.value)
                    counts[key] = counts.get(key, 0) + 1
        finally:
            store.close()
        return counts

    def _dead_letter_coords(self) -> set:
        path = self.store_dir / "dead_letter.jsonl"
        coords = set()
        if path.exists():
            for line in path.read_text().splitlines():
                try:
                    obj = json.loads(line)
                    coords.add((obj["topic"], obj["partition"],
                                obj["offset"]))
                except (ValueError, KeyError):
                    continue
        return coords

    def _build_report(self) -> dict:
        content = self._content_counts()
        dead_coords = self._dead_letter_coords()
        earliest = {p: self._earliest((TOPIC, p))
                    for p in range(self.topology.partitions)}

        stored = dead_lettered = purged = in_flight = rejected = 0
        duplicated = 0
        produced = 0
        for entry in self.ledger.values():
            if entry.status == 202:
                produced += 1
            elif entry.status is not None:
                rejected += 1
            dev = self.devices[entry.device_index]
            n = content.get((dev.pseudonym, entry.ts_ms, entry.value), 0)
            if n > 0:
                stored += 1
                duplicated += n - 1
            elif (entry.offset is not None
                  and (TOPIC, entry.partition, entry.offset) in dead_coords):
                dead_lettered += 1
            elif (entry.offset is not None
                  and entry.offset < earliest.get(entry.partition, 0)):
                purged += 1
            else:
                in_flight += 1

        posted = len(self.ledger)
        drain_time = (self.drained_at - self.duration_ms
                      if self.drained_at is not None else None)
        sink_state = {"counters": {}, "gaps": [], "positions": {}}
        if self.sink is not None:
            sink_state = {
                "counters": dict(self.sink.counters),
                "gaps": [dict(g) for g in self.sink.gaps],
                "positions": {f"{t}/{p}": pos for (t, p), pos
                              in sorted(self.sink.positions.items())},
            }
        workload = self.workload
        return {
            "v": REPORT_VERSION,
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "horizon_ms": self.loop.now_ms(),
            "ingest_path": self.ingest_path,
            "topology": {
                "placement": dict(sorted(self.topology.placement.items())),
                "brokers": self.topology.broker_count,
                "partitions": self.topology.partitions,
                "replication_factor": self.topology.replication_factor,
                "retention_ms": self.topology.retention_ms,
            },
            "workload": {
                "device_count": workload.device_count,
                "base_rate_per_device_hz": workload.base_rate_per_device_hz,
                "bursts": [[b.start_ms, b.duration_ms, b.rate_multiplier]
                           for b in workload.bursts],
                "payload_bytes": workload.payload_bytes,
                "series_mix": [[n, w] for n, w in workload.series_mix],
            },
            "counts": {
                "posted": posted,
                "produced": produced,
                "stored": stored,
                "duplicated": duplicated,
                "dead_lettered": dead_lettered,
                "lost": purged,
                "in_flight": in_flight,
                "rejected": rejected,
            },
            "conservation": {
                "posted": posted,
                "stored": stored,
                "dead_lettered": dead_lettered,
                "purged": purged,
                "in_flight": in_flight,
                "balanced": posted == (stored + dead_lettered + purged
                                       + in_flight),
            },
            "ack_latency": {
                "via_cloudlet": latency_summary(
                    self.ack_samples
                    if self.ingest_path == "via_cloudlet" else []),
                "via_cloud": latency_summary(
                    self.ack_samples
                    if self.ingest_path == "via_cloud" else []),
            },
            "e2e_latency": latency_summary(self.e2e_samples),
            "backlog": {
                "samples": self.backlog_samples,
                "peak": max((n for _, n in self.backlog_samples), default=0),
                "drained": self.drained_at is not None,
                "drain_time_ms": drain_time,
            },
            "retention_violations": (len(self.sink.gaps)
                                     if self.sink is not None else 0),
            "gateway": {"counters": dict(self.gateway_core.counters)},
            "sink": sink_state,
            "scenario": self.events_applied,
        }

    def _teardown(self):
        if self.sink is not None and not self.sink.stopped:
            self.sink.stop()
        if self._admin is not None:
            self._admin.close()
        if self.gateway is not None:
            self.gateway.close()
        for node in self.brokers.values():
            if node.running:
                node.stop()
        if self._own_dir:
            shutil.rmtree(self.base_dir, ignore_errors=True)


def simulate(topology: TopologyConfig, workload: WorkloadSpec,
             duration_ms: float, scenario=None, *,
             sink_rate_cap: float | None = None,
             sink_enabled: bool = True,
             base_dir=None,
             drain_timeout_ms: float = 600_000.0) -> dict:
    """Runs one simulated scenario and returns its report dict."""
    return Simulation(topology, workload, duration_ms, scenario,
                      sink_rate_cap=sink_rate_cap, sink_enabled=sink_enabled,
                      base_dir=base_dir,
                      drain_timeout_ms=drain_timeout_ms).run()
