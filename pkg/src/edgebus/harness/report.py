"""Run report assembly and rendering.

The report is a plain dict dumped with sorted keys so that a run is
byte-for-byte reproducible from its inputs.  Rendering (CSV files and
PNG charts) derives everything from the report itself, never from live
run state, so a saved report can be re-rendered later.
"""

import csv
import json
import math
from pathlib import Path

REPORT_VERSION = 1

# latency buckets double from 1 ms up; the last bucket is open-ended
_BUCKET_TOPS_MS = [2 ** i for i in range(14)]  # 1ms .. 8192ms


def quantile(sorted_vals: list, q: float) -> float:
    """Nearest-rank quantile of a pre-sorted list (0 when empty)."""
    if not sorted_vals:
        return 0.0
    rank = max(1, math.ceil(q * len(sorted_vals)))
    return float(sorted_vals[min(rank, len(sorted_vals)) - 1])


def latency_summary(samples_ms: list) -> dict:
    """Percentiles plus doubling histogram buckets for one sample set."""
    vals = sorted(samples_ms)
    buckets = [[top, 0] for top in _BUCKET_TOPS_MS] + [[None, 0]]
    for v in vals:
        for slot in buckets:
            if slot[0] is None or v < slot[0]:
                slot[1] += 1
                break
    return {
        "count": len(vals),
        "p50": quantile(vals, 0.50),
        "p90": quantile(vals, 0.90),
        "p99": quantile(vals, 0.99),
        "mean": (sum(vals) / len(vals)) if vals else 0.0,
        "max": vals[-1] if vals else 0.0,
        "buckets": [[top, n] for top, n in buckets],
    }


def dump_bytes(report: dict) -> bytes:
    """Canonical report encoding; determinism checks compare these bytes."""
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode()


def write_outputs(report: dict, out_path) -> list:
    """Writes report.json plus CSVs and charts next to it.  Returns the
    list of paths written."""
    out_path = Path(out_path)
    out_dir = out_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    out_path.write_bytes(dump_bytes(report))
    written.append(out_path)

    backlog_csv = out_dir / "backlog.csv"
    with backlog_csv.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_ms", "backlog_records"])
        for t_ms, n in report["backlog"]["samples"]:
            w.writerow([t_ms, n])
    written.append(backlog_csv)

    latency_csv = out_dir / "latency.csv"
    with latency_csv.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "path", "count", "p50_ms", "p90_ms",
                    "p99_ms", "mean_ms", "max_ms"])
        for path_name, s in sorted(report["ack_latency"].items()):
            w.writerow(["ack", path_name, s["count"], s["p50"], s["p90"],
                        s["p99"], s["mean"], s["max"]])
        e2e = report["e2e_latency"]
        w.writerow(["e2e", "device_to_stored", e2e["count"], e2e["p50"],
                    e2e["p90"], e2e["p99"], e2e["mean"], e2e["max"]])
    written.append(latency_csv)

    written.extend(render_figures(report, out_dir))
    return written


def render_figures(report: dict, out_dir) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []

    fig, ax = plt.subplots(figsize=(8, 4))
    samples = report["backlog"]["samples"]
    if samples:
        ts = [t / 1000.0 for t, _ in samples]
        ns = [n for _, n in samples]
        ax.step(ts, ns, where="post")
        ax.axvline(report["duration_ms"] / 1000.0, linestyle="--",
                   linewidth=1, label="workload end")
        ax.legend(loc="upper right")
    ax.set_xlabel("virtual time (s)")
    ax.set_ylabel("backlog (records)")
    ax.set_title("Broker backlog over the run")
    fig.tight_layout()
    backlog_png = out_dir / "backlog.png"
    fig.savefig(backlog_png, dpi=110)
    plt.close(fig)
    written.append(backlog_png)

    fig, ax = plt.subplots(figsize=(8, 4))
    plotted = False
    series = list(sorted(report["ack_latency"].items()))
    series.append(("device_to_stored", report["e2e_latency"]))
    for name, summary in series:
        if not summary["count"]:
            continue
        labels = [("<%g" % top) if top is not None else "more"
                  for top, _ in summary["buckets"]]
        counts = [n for _, n in summary["buckets"]]
        # trim trailing empty buckets so the x axis stays readable
        last = max((i for i, n in enumerate(counts) if n), default=0)
        xs = range(last + 1)
        ax.bar([x + 0.0 for x in xs], counts[:last + 1],
               width=0.38 if plotted else 0.8, label=name,
               align="edge" if plotted else "center", alpha=0.75)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels[:last + 1], rotation=45, ha="right")
        plotted = True
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("messages")
    ax.set_title("Latency distribution")
    if plotted:
        ax.legend()
    fig.tight_layout()
    latency_png = out_dir / "latency.png"
    fig.savefig(latency_png, dpi=110)
    plt.close(fig)
    written.append(latency_png)
    return written
