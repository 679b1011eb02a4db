"""Deterministic piecewise-Poisson post schedules.

Every device is an independent Poisson process whose rate is the base
rate times the product of all burst multipliers active at that instant.
Within a constant-rate segment gaps are exponential; at each segment
boundary the clock restarts, which is exact for a Poisson process
(memorylessness).  All draws come from one Random seeded with the run
seed, consumed in device order, so a seed fully determines the schedule.
"""

import random
from dataclasses import dataclass

from .config import WorkloadSpec


@dataclass(frozen=True)
class Post:
    """One scheduled measurement post."""

    t_ms: float
    device_index: int
    seq: int  # per-device sequence number, 0-based
    series: str


def rate_multiplier_at(bursts, t_ms: float) -> float:
    m = 1.0
    for b in bursts:
        if b.start_ms <= t_ms < b.start_ms + b.duration_ms:
            m *= b.rate_multiplier
    return m


def segments(spec: WorkloadSpec, duration_ms: float):
    """Constant-rate intervals [(start_ms, end_ms, rate_per_ms), ...]
    covering [0, duration_ms)."""
    cuts = {0.0, float(duration_ms)}
    for b in spec.bursts:
        cuts.add(min(float(duration_ms), b.start_ms))
        cuts.add(min(float(duration_ms), b.start_ms + b.duration_ms))
    edges = sorted(cuts)
    base_per_ms = spec.base_rate_per_device_hz / 1000.0
    out = []
    for a, b in zip(edges, edges[1:]):
        if b > a:
            out.append((a, b, base_per_ms * rate_multiplier_at(spec.bursts, a)))
    return out

def expected_posts(spec: WorkloadSpec, duration_ms: float) -> float:
    """Closed-form mean event count, an oracle for schedule tests."""
    per_device = sum((b - a) * r for a, b, r in segments(spec, duration_ms))
    return per_device * spec.device_count


def schedule(spec: WorkloadSpec, duration_ms: float, seed: int) -> list[Post]:
    """All posts for the run, ascending by time (ties by device)."""
    spec.validate()
    spec.check_horizon(duration_ms)
    rng = random.Random(f"{seed}:workload")
    segs = segments(spec, duration_ms)
    names = [name for name, _ in spec.series_mix]
    weights = [w for _, w in spec.series_mix]
    posts = []
    for dev in range(spec.device_count):
        seq = 0
        for a, b, rate in segs:
            if rate <= 0.0:
                continue
            t = a
            while True:
                t += rng.expovariate(rate)
                if t >= b:
                    break
                series = rng.choices(names, weights)[0]
                posts.append(Post(t, dev, seq, series))
                seq += 1
    posts.sort(key=lambda p: (p.t_ms, p.device_index, p.seq))
    return posts
