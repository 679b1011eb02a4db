"""Topology, workload, and scenario descriptions for simulated runs.

All three load from plain JSON files so runs can be described and
checked into a repo.  Parsing is strict: unknown keys are rejected so a
typo fails loudly instead of silently running a different experiment.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import ConfigError, ScenarioError
from ..sim.net import LinkParams

TIERS = ("device", "cloudlet", "cloud")
COMPONENTS = ("gateway", "broker", "sink")

DEFAULT_PLACEMENT = {"gateway": "cloudlet", "broker": "cloudlet",
                     "sink": "cloud"}


def _reject_unknown(obj: dict, allowed, where: str):
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {where}: {', '.join(extra)}")


@dataclass(frozen=True)
class LinkSpec:
    """One directional pair of identical links between two tiers."""

    one_way_latency_ms: float = 0.2
    jitter_ms: float = 0.0
    bandwidth_bytes_per_s: float | None = None
    loss_probability: float = 0.0

    def validate(self, name: str) -> "LinkSpec":
        if self.one_way_latency_ms < 0 or self.jitter_ms < 0:
            raise ConfigError(f"{name}: latency and jitter must be >= 0")
        if not (0.0 <= self.loss_probability < 1.0):
            raise ConfigError(f"{name}: loss_probability must be in [0, 1)")
        if (self.bandwidth_bytes_per_s is not None
                and self.bandwidth_bytes_per_s <= 0):
            raise ConfigError(f"{name}: bandwidth must be positive")
        return self

    def to_params(self) -> LinkParams:
        return LinkParams(
            one_way_latency_ms=self.one_way_latency_ms,
            jitter_ms=self.jitter_ms,
            bandwidth_bytes_per_s=self.bandwidth_bytes_per_s,
            loss_probability=self.loss_probability)

    @classmethod
    def from_dict(cls, obj: dict, name: str) -> "LinkSpec":
        if not isinstance(obj, dict):
            raise ConfigError(f"{name} must be an object")
        _reject_unknown(obj, ("one_way_latency_ms", "jitter_ms",
                              "bandwidth_bytes_per_s", "loss_probability"),
                        name)
        try:
            return cls(**{k: (None if v is None else float(v))
                          for k, v in obj.items()}).validate(name)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}") from None


@dataclass(frozen=True)
class TopologyConfig:
    """Three-tier world: devices at the edge, a cloudlet nearby, the
    cloud far away.  Components are placed on the two server tiers."""

    device_cloudlet: LinkSpec = field(default_factory=LinkSpec)
    device_cloud: LinkSpec = field(default_factory=LinkSpec)
    cloudlet_cloud: LinkSpec = field(default_factory=LinkSpec)
    placement: dict = field(default_factory=lambda: dict(DEFAULT_PLACEMENT))
    broker_count: int = 1
    replication_factor: int = 1
    partitions: int = 4
    retention_ms: int = 86_400_000
    rng_seed: int = 42

    def validate(self) -> "TopologyConfig":
        self.device_cloudlet.validate("device_cloudlet")
        self.device_cloud.validate("device_cloud")
        self.cloudlet_cloud.validate("cloudlet_cloud")
        _reject_unknown(self.placement, COMPONENTS, "placement")
        for comp in COMPONENTS:
            tier = self.placement.get(comp, DEFAULT_PLACEMENT[comp])
            if tier not in ("cloudlet", "cloud"):
                raise ConfigError(
                    f"placement.{comp} must be 'cloudlet' or 'cloud',"
                    f" got {tier!r}")
        if self.broker_count < 1:
            raise ConfigError("broker_count must be >= 1")
        if not (1 <= self.replication_factor <= self.broker_count):
            raise ConfigError("replication_factor must be between 1 and"
                              " broker_count")
        if self.partitions < 1:
            raise ConfigError("partitions must be >= 1")
        if self.retention_ms <= 0:
            raise ConfigError("retention_ms must be positive")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be >= 0")
        return self

    def tier_of(self, component: str) -> str:
        return self.placement.get(component, DEFAULT_PLACEMENT[component])

    def link_between(self, tier_a: str, tier_b: str) -> LinkSpec | None:
        """The configured link for a tier pair; None means same tier
        (the simulator's near-zero default applies)."""
        pair = frozenset((tier_a, tier_b))
        if len(pair) == 1:
            return None
        if pair == frozenset(("device", "cloudlet")):
            return self.device_cloudlet
        if pair == frozenset(("device", "cloud")):
            return self.device_cloud
        if pair == frozenset(("cloudlet", "cloud")):
            return self.cloudlet_cloud
        raise ConfigError(f"no link defined between {tier_a} and {tier_b}")

    def with_placement(self, **comps) -> "TopologyConfig":
        merged = dict(self.placement)
        merged.update(comps)
        return replace(self, placement=merged).validate()

    @classmethod
    def from_dict(cls, obj: dict) -> "TopologyConfig":
        if not isinstance(obj, dict):
            raise ConfigError("topology must be a JSON object")
        _reject_unknown(obj, ("links", "placement", "brokers", "partitions",
                              "replication_factor", "retention_ms",
                              "rng_seed"), "topology")
        links = obj.get("links", {})
        if not isinstance(links, dict):
            raise ConfigError("topology.links must be an object")
        _reject_unknown(links, ("device_cloudlet", "device_cloud",
                                "cloudlet_cloud"), "topology.links")
        kw = {}
        for name in ("device_cloudlet", "device_cloud", "cloudlet_cloud"):
            if name in links:
                kw[name] = LinkSpec.from_dict(links[name], name)
        placement = dict(DEFAULT_PLACEMENT)
        placement.update(obj.get("placement", {}))
        try:
            return cls(
                placement=placement,
                broker_count=int(obj.get("brokers", 1)),
                replication_factor=int(obj.get("replication_factor", 1)),
                partitions=int(obj.get("partitions", 4)),
                retention_ms=int(obj.get("retention_ms", 86_400_000)),
                rng_seed=int(obj.get("rng_seed", 42)),
                **kw).validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"topology: {e}") from None


@dataclass(frozen=True)
class Burst:
    start_ms: float
    duration_ms: float
    rate_multiplier: float


@dataclass(frozen=True)
class WorkloadSpec:
    """Crowd-sensing load: many devices posting at a Poisson base rate,
    with bursty windows where the rate is multiplied."""

    device_count: int
    base_rate_per_device_hz: float
    bursts: tuple = ()
    payload_bytes: int = 120
    series_mix: tuple = (("sensor.reading", 1.0),)
    device_id_prefix: str = "device-"

    def validate(self) -> "WorkloadSpec":
        if self.device_count < 0:
            raise ConfigError("device_count must be >= 0")
        if self.base_rate_per_device_hz < 0:
            raise ConfigError("base_rate_per_device_hz must be >= 0")
        for b in self.bursts:
            if b.start_ms < 0 or b.duration_ms < 0:
                raise ConfigError("burst start and duration must be >= 0")
            if b.rate_multiplier < 0:
                raise ConfigError("burst rate_multiplier must be >= 0")
        if not self.series_mix:
            raise ConfigError("series_mix must not be empty")
        for name, weight in self.series_mix:
            if not name or not isinstance(name, str):
                raise ConfigError("series names must be non-empty strings")
            if not (weight > 0):
                raise ConfigError(f"series {name!r} weight must be > 0")
        if self.payload_bytes < 0:
            raise ConfigError("payload_bytes must be >= 0")
        if not self.device_id_prefix:
            raise ConfigError("device_id_prefix must not be empty")
        return self

    def check_horizon(self, duration_ms: float):
        for b in self.bursts:
            if b.start_ms + b.duration_ms > duration_ms:
                raise ConfigError(
                    f"burst at {b.start_ms}ms extends past the"
                    f" {duration_ms}ms run horizon")

    def device_id(self, index: int) -> str:
        return f"{self.device_id_prefix}{index:05d}"

    @classmethod
    def from_dict(cls, obj: dict) -> "WorkloadSpec":
        if not isinstance(obj, dict):
            raise ConfigError("workload must be a JSON object")
        _reject_unknown(obj, ("device_count", "base_rate_per_device_hz",
                              "bursts", "payload_bytes", "series_mix",
                              "device_id_prefix"), "workload")
        bursts = []
        for i, b in enumerate(obj.get("bursts", [])):
            if not isinstance(b, dict):
                raise ConfigError(f"bursts[{i}] must be an object")
            _reject_unknown(b, ("start_ms", "duration_ms",
                                "rate_multiplier"), f"bursts[{i}]")
            try:
                bursts.append(Burst(float(b["start_ms"]),
                                    float(b["duration_ms"]),
                                    float(b["rate_multiplier"])))
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"bursts[{i}]: {e}") from None
        mix_in = obj.get("series_mix", [["sensor.reading", 1.0]])
        if isinstance(mix_in, dict):
            mix_in = sorted(mix_in.items())
        mix = []
        for i, pair in enumerate(mix_in):
            try:
                name, weight = pair
                mix.append((str(name), float(weight)))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"series_mix[{i}]: {e}") from None
        try:
            return cls(
                device_count=int(obj.get("device_count", 0)),
                base_rate_per_device_hz=float(
                    obj.get("base_rate_per_device_hz", 0.0)),
                bursts=tuple(bursts),
                payload_bytes=int(obj.get("payload_bytes", 120)),
                series_mix=tuple(mix),
                device_id_prefix=str(obj.get("device_id_prefix", "device-")),
            ).validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"workload: {e}") from None


SCENARIO_ACTIONS = ("kill_broker", "restart_broker", "partition_link",
                    "heal_link", "stop_sink", "start_sink")


@dataclass(frozen=True)
class ScenarioEvent:
    at_ms: float
    action: str
    broker: int | None = None
    between: tuple | None = None  # (tier, tier) for link events

    def to_dict(self) -> dict:
        out = {"at_ms": self.at_ms, "action": self.action}
        if self.broker is not None:
            out["broker"] = self.broker
        if self.between is not None:
            out["between"] = list(self.between)
        return out


def parse_scenario(events) -> list[ScenarioEvent]:
    """Validates a scenario script (a JSON array of events).  Component
    references are checked later against the actual topology."""
    if not isinstance(events, list):
        raise ScenarioError("scenario must be a JSON array of events")
    out = []
    for i, ev in enumerate(events):
        if not isinstance(ev, dict):
            raise ScenarioError(f"events[{i}] must be an object")
        _reject_unknown_scenario(ev, i)
        action = ev.get("action")
        if action not in SCENARIO_ACTIONS:
            raise ScenarioError(f"events[{i}]: unknown action {action!r}")
        try:
            at_ms = float(ev["at_ms"])
        except (KeyError, TypeError, ValueError):
            raise ScenarioError(f"events[{i}]: at_ms is required") from None
        if at_ms < 0:
            raise ScenarioError(f"events[{i}]: at_ms must be >= 0")
        broker = None
        between = None
        if action in ("kill_broker", "restart_broker"):
            try:
                broker = int(ev["broker"])
            except (KeyError, TypeError, ValueError):
                raise ScenarioError(
                    f"events[{i}]: {action} needs a broker id") from None
        elif action in ("partition_link", "heal_link"):
            pair = ev.get("between")
            if (not isinstance(pair, list) or len(pair) != 2
                    or pair[0] == pair[1]):
                raise ScenarioError(
                    f"events[{i}]: {action} needs between: [tier, tier]")
            for tier in pair:
                if tier not in TIERS:
                    raise ScenarioError(
                        f"events[{i}]: unknown tier {tier!r}")
            between = (str(pair[0]), str(pair[1]))
        out.append(ScenarioEvent(at_ms, action, broker, between))
    out.sort(key=lambda e: e.at_ms)
    return out


def _reject_unknown_scenario(ev: dict, i: int):
    extra = sorted(set(ev) - {"at_ms", "action", "broker", "between"})
    if extra:
        raise ScenarioError(f"events[{i}]: unknown keys {', '.join(extra)}")


def load_topology(path) -> TopologyConfig:
    return TopologyConfig.from_dict(_load_json(path, "topology"))


def load_workload(path) -> WorkloadSpec:
    return WorkloadSpec.from_dict(_load_json(path, "workload"))


def load_scenario(path) -> list[ScenarioEvent]:
    return parse_scenario(_load_json(path, "scenario"))


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read {what} file: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} file is not valid JSON: {e}") from None
