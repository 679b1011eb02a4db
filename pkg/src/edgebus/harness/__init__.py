"""Deterministic virtual-time harness: real components, simulated world."""

from .config import (Burst, LinkSpec, ScenarioEvent, TopologyConfig,
                     WorkloadSpec, load_scenario, load_topology,
                     load_workload, parse_scenario)
from .report import dump_bytes, latency_summary, quantile, write_outputs
from .run import Simulation, simulate
from .studies import burst_drain, compare_paths, expected_ack_ratio
from .workload import Post, expected_posts, schedule

__all__ = [
    "Burst", "LinkSpec", "Post", "ScenarioEvent", "Simulation",
    "TopologyConfig", "WorkloadSpec", "burst_drain", "compare_paths",
    "dump_bytes", "expected_ack_ratio", "expected_posts", "latency_summary",
    "load_scenario", "load_topology", "load_workload", "parse_scenario",
    "quantile", "schedule", "simulate", "write_outputs",
]
