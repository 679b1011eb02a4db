"""Topic registry and the deterministic key -> partition router.

A topic maps one city service to a fixed set of partitioned logs.  Replica
placement is deterministic round-robin over the broker ids, so the same
create call on the same cluster always yields the same assignment.  The
registry is a JSON array with one object per topic:

    {"name": ..., "partition_count": ..., "replication_factor": ...,
     "retention_ms": ..., "assignment": [[broker ids], ...],
     "leaders": [id or null per partition], "epochs": [u32 per partition]}

written atomically (temp file + rename).  ``leaders`` holds null while a
partition is offline; ``epochs`` increase by one on every leadership change.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InsufficientBrokers, InvalidConfig, TopicExists, UnknownPartition, UnknownTopic

_NAME_RE = re.compile(r"^[a-z0-9._-]{1,255}$")

FNV_OFFSET_BASIS = 2166136261
FNV_PRIME = 16777619


def fnv1a_32(data: bytes) -> int:
    h = FNV_OFFSET_BASIS
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFF
    return h


def partition_for_key(key: bytes | None, partition_count: int, round_robin_counter: int) -> int:
    """Route a record: keyed messages hash deterministically, unkeyed ones
    round-robin on the caller's counter."""
    if partition_count < 1:
        raise ValueError("partition_count must be >= 1")
    if key is None:
        return round_robin_counter % partition_count
    return fnv1a_32(key) % partition_count


@dataclass(frozen=True)
class TopicConfig:
    name: str
    partition_count: int
    replication_factor: int
    retention_ms: int

    def validate(self) -> "TopicConfig":
        if not _NAME_RE.match(self.name):
            raise InvalidConfig(
                f"topic name {self.name!r} must be 1-255 chars of [a-z0-9._-]"
            )
        if self.partition_count < 1:
            raise InvalidConfig("partition_count must be >= 1")
        if self.replication_factor < 1:
            raise InvalidConfig("replication_factor must be >= 1")
        if self.retention_ms < 1000:
            raise InvalidConfig("retention_ms must be >= 1000")
        return self


@dataclass
class TopicMeta:
    config: TopicConfig
    assignment: list[list[int]]  # per partition, ordered; first entry = initial leader
    leaders: list[int | None]
    epochs: list[int]

    def to_dict(self) -> dict:
        return {
            "name": self.config.name,
            "partition_count": self.config.partition_count,
            "replication_factor": self.config.replication_factor,
            "retention_ms": self.config.retention_ms,
            "assignment": [list(r) for r in self.assignment],
            "leaders": list(self.leaders),
            "epochs": list(self.epochs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TopicMeta":
        cfg = TopicConfig(
            d["name"], d["partition_count"], d["replication_factor"], d["retention_ms"]
        )
        return cls(
            cfg,
            [list(r) for r in d["assignment"]],
            list(d["leaders"]),
            list(d["epochs"]),
        )


def assign_replicas(partition_count: int, replication_factor: int, broker_ids: list[int]) -> list[list[int]]:
    """Round-robin placement: partition p lands on brokers
    [(p + j) mod N for j in 0..rf), in order, over the sorted broker ids."""
    ids = sorted(broker_ids)
    n = len(ids)
    return [
        [ids[(p + j) % n] for j in range(replication_factor)]
        for p in range(partition_count)
    ]


class TopicRegistry:
    """In-memory registry with atomic JSON persistence.

    Mutations happen on the controller and are broadcast; every broker keeps
    and persists its own copy, adopting whichever snapshot is newer.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._topics: dict[str, TopicMeta] = {}
        if self.path and self.path.exists():
            self._load()

    # version grows on every mutation: topic creation adds a topic, failover
    # bumps an epoch, so (topic count, epoch total) orders snapshots
    def version(self) -> tuple[int, int]:
        return (len(self._topics), sum(sum(m.epochs) for m in self._topics.values()))

    def topic_names(self) -> list[str]:
        return sorted(self._topics)

    def create(self, config: TopicConfig, broker_ids: list[int]) -> TopicMeta:
        config.validate()
        if config.name in self._topics:
            raise TopicExists(config.name)
        if config.replication_factor > len(broker_ids):
            raise InsufficientBrokers(
                f"replication_factor {config.replication_factor} exceeds "
                f"cluster size {len(broker_ids)}"
            )
        assignment = assign_replicas(
            config.partition_count, config.replication_factor, broker_ids
        )
        meta = TopicMeta(
            config=config,
            assignment=assignment,
            leaders=[replicas[0] for replicas in assignment],
            epochs=[0] * config.partition_count,
        )
        self._topics[config.name] = meta
        self.persist()
        return meta

    def lookup(self, name: str) -> TopicMeta:
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopic(name) from None

    def partition_meta(self, name: str, partition: int) -> tuple[TopicMeta, list[int], int | None, int]:
        meta = self.lookup(name)
        if not 0 <= partition < meta.config.partition_count:
            raise UnknownPartition(f"{name}/{partition}")
        return meta, meta.assignment[partition], meta.leaders[partition], meta.epochs[partition]

    def set_leader(self, name: str, partition: int, leader: int | None, epoch: int) -> None:
        meta = self.lookup(name)
        meta.leaders[partition] = leader
        meta.epochs[partition] = epoch
        self.persist()

    def to_snapshot(self) -> list[dict]:
        return [self._topics[name].to_dict() for name in sorted(self._topics)]

    def adopt_snapshot(self, snapshot: list[dict]) -> bool:
        """Replace state if the snapshot is strictly newer; returns True if adopted."""
        incoming = {d["name"]: TopicMeta.from_dict(d) for d in snapshot}
        version = (
            len(incoming),
            sum(sum(m.epochs) for m in incoming.values()),
        )
        if version <= self.version():
            return False
        self._topics = incoming
        self.persist()
        return True

    def persist(self) -> None:
        if not self.path:
            return
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(self.to_snapshot(), f, indent=1, sort_keys=True)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)

    def _load(self) -> None:
        with open(self.path) as f:
            snapshot = json.load(f)
        self._topics = {d["name"]: TopicMeta.from_dict(d) for d in snapshot}
