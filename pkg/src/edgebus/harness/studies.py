"""Canned experiments built on simulate().

compare_paths quantifies the edge advantage: the same seeded workload
is ingested once through a cloudlet-placed gateway and once through a
cloud-placed one, and the ack-latency percentiles are compared.  The
expected p50 ratio follows the 2x one-way RTT model, so tests can check
the harness against a closed-form value before trusting it.

burst_drain measures buffering: a burst overruns a rate-capped sink,
backlog builds in the broker, and the report says how high it got and
how long the drain took.  Retention violations surface as a loss count,
never as an exception.
"""

from pathlib import Path

from ..errors import ConfigError
from .config import TopologyConfig, WorkloadSpec
from .run import simulate


def compare_paths(topology: TopologyConfig, workload: WorkloadSpec,
                  duration_ms: float, *, base_dir=None) -> dict:
    """Same workload via cloudlet and via cloud; returns both ack
    percentile sets and the cloud/cloudlet p50 ratio."""
    dirs = {"via_cloudlet": None, "via_cloud": None}
    if base_dir is not None:
        base = Path(base_dir)
        dirs = {k: base / k for k in dirs}

    edge = topology.with_placement(gateway="cloudlet", broker="cloudlet")
    cloud = topology.with_placement(gateway="cloud", broker="cloud")
    rep_edge = simulate(edge, workload, duration_ms,
                        base_dir=dirs["via_cloudlet"])
    rep_cloud = simulate(cloud, workload, duration_ms,
                         base_dir=dirs["via_cloud"])

    a = rep_edge["ack_latency"]["via_cloudlet"]
    b = rep_cloud["ack_latency"]["via_cloud"]
    ratio = (b["p50"] / a["p50"]) if a["p50"] > 0 else 0.0
    return {
        "cloudlet_ack_p50": a["p50"],
        "cloudlet_ack_p99": a["p99"],
        "cloud_ack_p50": b["p50"],
        "cloud_ack_p99": b["p99"],
        "ratio": ratio,
        "reports": {"via_cloudlet": rep_edge, "via_cloud": rep_cloud},
    }


def expected_ack_ratio(topology: TopologyConfig,
                       service_ms: float = 0.0) -> float:
    """Closed-form p50 ratio from the 2x one-way RTT model, the oracle
    compare_paths results are checked against."""
    rtt_edge = 2 * topology.device_cloudlet.one_way_latency_ms + service_ms
    rtt_cloud = 2 * topology.device_cloud.one_way_latency_ms + service_ms
    if rtt_edge <= 0:
        raise ConfigError("edge RTT must be positive for a ratio")
    return rtt_cloud / rtt_edge


def burst_drain(topology: TopologyConfig, workload: WorkloadSpec,
                consumer_rate_cap: float, *, duration_ms: float | None = None,
                base_dir=None, drain_timeout_ms: float = 600_000.0) -> dict:
    """Runs the bursty workload against a rate-capped sink and reports
    peak backlog, drain time, and loss (messages purged unread)."""
    if consumer_rate_cap <= 0:
        raise ConfigError("consumer_rate_cap must be positive")
    if not workload.bursts:
        raise ConfigError("burst_drain needs a workload with bursts")
    if duration_ms is None:
        duration_ms = max(b.start_ms + b.duration_ms
                          for b in workload.bursts) + 1000.0
    report = simulate(topology, workload, duration_ms,
                      sink_rate_cap=consumer_rate_cap, base_dir=base_dir,
                      drain_timeout_ms=drain_timeout_ms)
    return {
        "peak_backlog": report["backlog"]["peak"],
        "drain_time_ms": report["backlog"]["drain_time_ms"],
        "loss": report["counts"]["lost"],
        "report": report,
    }
