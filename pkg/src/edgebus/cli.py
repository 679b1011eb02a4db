"""One binary for operating the stack: brokers, topics, console produce and
consume, the measurement sink, the HTTP gateway, simulation runs, and stats.

Every subcommand is a thin shell over the library: it parses flags, calls the
same operations tests call directly, prints, and maps failures to exit codes.
Exit status is 0 on success, 1 on usage errors, 2 on runtime failures.

Long-running subcommands (broker start, gateway start, sink run, consume
without --no-wait) serve until SIGINT or SIGTERM and then shut down cleanly.
"""

from __future__ import annotations

import base64
import csv
import json
import os
import re
import signal
import sys
import threading
import time
from contextlib import contextmanager
from dataclasses import replace
from datetime import datetime, timezone

import click

from .broker import BrokerConfig, BrokerNode
from .client import SyncClient
from .errors import EdgebusError
from .gateway import GatewayConfig, GatewayCore, HttpGateway
from .harness import (burst_drain, compare_paths, load_scenario,
                      load_topology, load_workload, simulate, write_outputs)
from .runtime import RealLoop, RealNetwork
from .sink import SinkConfig, SinkCore
from .tsstore import TsStore

BROKER_CONFIG_ENV = "CLOUDLET_BROKER_CONFIG"
GATEWAY_SECRET_ENV = "CLOUDLET_GATEWAY_SECRET_FILE"
DEFAULT_BROKERS = "127.0.0.1:9092"


class _Fail(click.ClickException):
    """Runtime failure (reachability, bad files, broker errors): exit 2."""
    exit_code = 2


def _error_text(e: EdgebusError) -> str:
    """Human line for a typed error; extras carry things like the earliest
    valid offset, which the operator needs to recover."""
    words = e.code.replace("_", " ")
    msg = e.detail or ""
    if e.extra:
        kv = ", ".join(f"{k}={v}" for k, v in sorted(e.extra.items()))
        msg = f"{msg} ({kv})" if msg else f"({kv})"
    return f"{words}: {msg}" if msg else words


def _split_brokers(brokers: str) -> list[str]:
    addrs = [a.strip() for a in brokers.split(",") if a.strip()]
    if not addrs:
        raise click.UsageError("--brokers must name at least one host:port")
    return addrs


@contextmanager
def _client(brokers: str):
    c = SyncClient(_split_brokers(brokers))
    try:
        yield c
    finally:
        c.close()


def _on_loop(loop, fn, timeout_s: float = 30.0):
    """Run fn on the dispatch thread and return its result.  Component state
    is single-threaded; the CLI thread must never touch it directly."""
    done = threading.Event()
    box: list = [None, None]

    def call():
        try:
            box[0] = fn()
        except BaseException as e:
            box[1] = e
        done.set()

    loop.post(call)
    if not done.wait(timeout_s):
        raise _Fail("timed out waiting for the event loop")
    if box[1] is not None:
        raise box[1]
    return box[0]


def _serve_until_signal():
    """Block until SIGINT or SIGTERM.  Handlers are restored on the way out
    so a second interrupt during shutdown still kills the process."""
    stop = threading.Event()

    def request_stop(signum, frame):
        stop.set()

    previous = {s: signal.signal(s, request_stop)
                for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        while not stop.is_set():
            stop.wait(0.5)
    finally:
        for s, h in previous.items():
            signal.signal(s, h)


def _brokers_option(fn):
    return click.option(
        "--brokers", default=DEFAULT_BROKERS, show_default=True,
        metavar="HOST:PORT[,..]",
        help="Bootstrap broker addresses, comma separated.")(fn)


@click.group()
def cli():
    """Partitioned pub-sub broker, gateway, sink, and simulation tools."""


# ---------------------------------------------------------------- broker

@cli.group()
def broker():
    """Run broker nodes."""


def _load_broker_config(path: str) -> BrokerConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except OSError as e:
        raise _Fail(f"cannot read broker config: {e}")
    except json.JSONDecodeError as e:
        raise _Fail(f"broker config is not valid JSON: {e}")
    if not isinstance(obj, dict):
        raise _Fail("broker config must be a JSON object")
    obj = dict(obj)
    peers = []
    for p in obj.get("peers", []):
        if not isinstance(p, (list, tuple)) or len(p) != 3:
            raise _Fail("each peer must be [broker_id, peer_addr, client_addr]")
        peers.append((int(p[0]), str(p[1]), str(p[2])))
    obj["peers"] = peers
    try:
        return BrokerConfig(**obj).validate()
    except TypeError as e:
        raise _Fail(f"bad broker config: {e}")


@broker.command("start")
@click.option("--config", "config_path", metavar="FILE",
              help=f"JSON config file; falls back to ${BROKER_CONFIG_ENV}.")
def broker_start(config_path):
    """Start one broker node and serve until interrupted.

    The config file is a JSON object with the broker's settings: broker_id,
    data_dir, client_listen, peer_listen, peers (a list of
    [broker_id, peer_addr, client_addr] triples for the other cluster
    members), and optional tuning fields such as segment_max_bytes and
    default_retention_ms.
    """
    path = config_path or os.environ.get(BROKER_CONFIG_ENV)
    if not path:
        raise click.UsageError(
            f"--config or ${BROKER_CONFIG_ENV} must name a config file")
    cfg = _load_broker_config(path)
    loop = RealLoop(f"broker{cfg.broker_id}")
    network = RealNetwork(loop)

    def boot():
        node = BrokerNode(cfg, loop, network)
        node.start()
        return node

    node = _on_loop(loop, boot)
    click.echo(f"broker {cfg.broker_id}: clients on {cfg.client_listen}, "
               f"peers on {cfg.peer_listen}, data in {cfg.data_dir}")
    try:
        _serve_until_signal()
    finally:
        _on_loop(loop, lambda: node.stop() if node.running else None)
        loop.stop(drain=True)
    click.echo(f"broker {cfg.broker_id} stopped")


# ---------------------------------------------------------------- topics

@cli.group()
def topic():
    """Create and inspect topics."""


@topic.command("create")
@click.argument("name")
@_brokers_option
@click.option("--partitions", type=click.IntRange(min=1), default=1,
              show_default=True, help="Fixed partition count.")
@click.option("--replication-factor", type=click.IntRange(min=1), default=1,
              show_default=True, help="Copies of each partition.")
@click.option("--retention-ms", type=click.IntRange(min=1),
              default=86_400_000, show_default=True,
              help="Sealed segments older than this are purged.")
def topic_create(name, brokers, partitions, replication_factor, retention_ms):
    """Create topic NAME."""
    with _client(brokers) as c:
        meta = c.create_topic(name, partitions, replication_factor,
                              retention_ms)
    click.echo(f"created {meta['name']}: {meta['partition_count']} "
               f"partitions, rf={meta['replication_factor']}, "
               f"retention_ms={meta['retention_ms']}")


@topic.command("list")
@_brokers_option
@click.option("--json", "as_json", is_flag=True,
              help="Print the full metadata snapshot as JSON.")
def topic_list(brokers, as_json):
    """List topics known to the cluster."""
    with _client(brokers) as c:
        meta = c.metadata(force=True)
    topics = meta.get("topics", [])
    if as_json:
        click.echo(json.dumps(topics, sort_keys=True, indent=2))
        return
    for t in topics:
        click.echo(f"{t['name']}\tpartitions={t['partition_count']}"
                   f"\trf={t['replication_factor']}"
                   f"\tretention_ms={t['retention_ms']}")


@topic.command("describe")
@click.argument("name")
@_brokers_option
@click.option("--json", "as_json", is_flag=True,
              help="Print the raw describe response as JSON.")
def topic_describe(name, brokers, as_json):
    """Show per-partition leaders, ISR, and offsets for topic NAME."""
    with _client(brokers) as c:
        body = c.json_op({"op": "describe", "topic": name})
    if as_json:
        click.echo(json.dumps(body, sort_keys=True, indent=2))
        return
    t = body["topic"]
    click.echo(f"{t['name']}: partitions={t['partition_count']} "
               f"rf={t['replication_factor']} "
               f"retention_ms={t['retention_ms']}")
    for p in body["partitions"]:
        line = (f"  partition {p['partition']}: leader={p['leader']} "
                f"epoch={p['epoch']}")
        if p.get("hosted", True):
            line += (f" hw={p['high_watermark']} log_end={p['log_end']}"
                     f" earliest={p['earliest']}")
            if p.get("isr") is not None:
                line += f" isr={','.join(str(b) for b in p['isr'])}"
        click.echo(line)


# ------------------------------------------------- console produce/consume

@cli.command("produce")
@click.argument("topic_name", metavar="TOPIC")
@_brokers_option
@click.option("--partition", type=int, default=-1, show_default=True,
              help="Target partition; -1 routes by key.")
@click.option("--key-separator", "key_separator", default=None,
              metavar="SEP", help="Split each line into key and value at "
              "the first SEP; lines without SEP stay unkeyed.")
@click.option("--base64", "as_base64", is_flag=True,
              help="Treat key and value as base64 for binary-safe input.")
def produce(topic_name, brokers, partition, key_separator, as_base64):
    """Read lines from standard input and append each as one record.

    Prints one "partition:offset" per line, in input order.
    """
    def field(text: str) -> bytes:
        if as_base64:
            try:
                return base64.b64decode(text, validate=True)
            except Exception:
                raise _Fail(f"not valid base64: {text!r}")
        return text.encode("utf-8")

    with _client(brokers) as c:
        for line in sys.stdin:
            line = line.rstrip("\r\n")
            key = None
            if key_separator and key_separator in line:
                k, _, line = line.partition(key_separator)
                key = field(k)
            ts = int(time.time() * 1000)
            offsets = c.produce(topic_name, partition,
                                [(key, field(line), ts)])
            for p, off in offsets:
                click.echo(f"{p}:{off}")


@cli.command("consume")
@click.argument("topic_name", metavar="TOPIC")
@_brokers_option
@click.option("--partition", type=click.IntRange(min=0), default=0,
              show_default=True)
@click.option("--from", "from_offset", type=click.IntRange(min=0), default=0,
              show_default=True, help="First offset to read.")
@click.option("--max", "max_records", type=click.IntRange(min=1),
              default=None, help="Stop after this many records.")
@click.option("--no-wait", is_flag=True,
              help="Exit at the end of the log instead of waiting for more.")
@click.option("--base64", "as_base64", is_flag=True,
              help="Print key and value base64-encoded (binary safe).")
def consume(topic_name, brokers, partition, from_offset, max_records,
            no_wait, as_base64):
    """Print committed records as "offset<TAB>key<TAB>value".

    The key column is empty for unkeyed records.  The position lives only in
    this process: nothing is stored broker-side, so restarting rereads from
    --from.
    """
    def rendered(data) -> str:
        if data is None:
            return ""
        if as_base64:
            return base64.b64encode(data).decode("ascii")
        return data.decode("utf-8", errors="replace")

    remaining = max_records
    offset = from_offset
    interrupted = threading.Event()

    def request_stop(signum, frame):
        interrupted.set()

    previous = {s: signal.signal(s, request_stop)
                for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        with _client(brokers) as c:
            while not interrupted.is_set():
                batch = remaining if remaining is not None else 0
                res = c.fetch(topic_name, partition, offset,
                              max_records=batch,
                              wait_ms=0 if no_wait else 1000)
                for rec in res.records:
                    click.echo(f"{rec.offset}\t{rendered(rec.key)}"
                               f"\t{rendered(rec.value)}")
                    offset = rec.offset + 1
                    if remaining is not None:
                        remaining -= 1
                        if remaining <= 0:
                            return
                if no_wait and not res.records \
                        and offset >= res.high_watermark:
                    return
    finally:
        for s, h in previous.items():
            signal.signal(s, h)


# ------------------------------------------------------------------ sink

@cli.group()
def sink():
    """Drain measurement topics into the time-series store."""


@sink.command("run")
@_brokers_option
@click.option("--topics", required=True, metavar="NAME[,..]",
              help="Topics to drain, comma separated.")
@click.option("--store", "store_dir", required=True, metavar="DIR",
              help="Directory for the time-series store.")
@click.option("--rate-limit", type=float, default=None, metavar="N",
              help="Cap ingest at N records per second.")
@click.option("--bucket-ms", type=click.IntRange(min=1), default=None,
              help="Time-bucket width for new stores (default one day).")
def sink_run(brokers, topics, store_dir, rate_limit, bucket_ms):
    """Consume measurement topics into DIR until interrupted.

    Progress is checkpointed in the store directory, so a restarted sink
    resumes where it stopped.  Poison records land in dead_letter.jsonl
    instead of stalling the feed.
    """
    names = [t.strip() for t in topics.split(",") if t.strip()]
    if not names:
        raise click.UsageError("--topics must name at least one topic")
    kwargs = {"rate_limit_per_s": rate_limit}
    if bucket_ms is not None:
        kwargs["bucket_ms"] = bucket_ms
    cfg = SinkConfig(store_dir=store_dir, topics=names, **kwargs)
    loop = RealLoop("sink")
    network = RealNetwork(loop)

    def boot():
        core = SinkCore(loop, network, _split_brokers(brokers), cfg)
        core.start()
        return core

    core = _on_loop(loop, boot)
    click.echo(f"sink draining {', '.join(names)} into {store_dir}")
    try:
        _serve_until_signal()
    finally:
        _on_loop(loop, core.stop)
        loop.stop(drain=True)
    click.echo(json.dumps(core.counters, sort_keys=True))


def _parse_instant(label: str, text: str) -> int:
    """ISO 8601 to epoch milliseconds; naive times are taken as UTC."""
    normalized = text[:-1] + "+00:00" if text.endswith("Z") else text
    try:
        dt = datetime.fromisoformat(normalized)
    except ValueError:
        raise click.BadParameter(f"{text!r} is not ISO 8601", param_hint=label)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * 1000)


def _instant_iso(ms: int) -> str:
    dt = datetime.fromtimestamp(ms / 1000.0, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


@sink.command("query")
@click.option("--store", "store_dir", required=True, metavar="DIR",
              help="Directory of an existing time-series store.")
@click.option("--series", required=True, help="Series name to query.")
@click.option("--from", "t0", required=True, metavar="ISO8601",
              help="Range start, inclusive.")
@click.option("--to", "t1", required=True, metavar="ISO8601",
              help="Range end, exclusive.")
@click.option("--json", "as_json", is_flag=True, help="JSON array output.")
@click.option("--csv", "as_csv", is_flag=True, help="CSV output.")
def sink_query(store_dir, series, t0, t1, as_json, as_csv):
    """Print stored points for one series in a half-open time range."""
    if as_json and as_csv:
        raise click.UsageError("--json and --csv are mutually exclusive")
    start = _parse_instant("--from", t0)
    end = _parse_instant("--to", t1)
    if end < start:
        raise click.UsageError("--to must not precede --from")
    store = TsStore(store_dir, read_only=True)
    try:
        points = store.query_range(series, start, end)
    finally:
        store.close()
    if as_json:
        rows = [{"timestamp_ms": p.timestamp_ms,
                 "device_pseudonym": p.device_pseudonym,
                 "value": p.value, "lat": p.lat, "lon": p.lon}
                for p in points]
        click.echo(json.dumps(rows, indent=2))
        return
    if as_csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["timestamp_ms", "device_pseudonym", "value",
                    "lat", "lon"])
        for p in points:
            w.writerow([p.timestamp_ms, p.device_pseudonym, repr(p.value),
                        "" if p.lat is None else repr(p.lat),
                        "" if p.lon is None else repr(p.lon)])
        return
    for p in points:
        line = (f"{_instant_iso(p.timestamp_ms)}\t{p.device_pseudonym}"
                f"\t{p.value!r}")
        if p.lat is not None or p.lon is not None:
            line += f"\t{p.lat},{p.lon}"
        click.echo(line)


# --------------------------------------------------------------- gateway

@cli.group()
def gateway():
    """HTTP ingress for mobile producers and consumers."""


def _read_secret(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise _Fail(f"cannot read secret file: {e}")
    # a trailing newline is an artifact of how the file was written, not
    # part of the key; anything else is kept byte for byte
    if data.endswith(b"\n"):
        data = data[:-1]
    if data.endswith(b"\r"):
        data = data[:-1]
    return data


def _load_routes(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except OSError as e:
        raise _Fail(f"cannot read routing table: {e}")
    except json.JSONDecodeError as e:
        raise _Fail(f"routing table is not valid JSON: {e}")
    if (not isinstance(obj, dict)
            or not all(isinstance(k, str) and isinstance(v, str)
                       for k, v in obj.items())):
        raise _Fail("routing table must map series names to topic names")
    return obj


@gateway.command("start")
@click.option("--listen", default="127.0.0.1:8080", show_default=True,
              metavar="HOST:PORT")
@_brokers_option
@click.option("--routing", "routing_path", metavar="FILE",
              help="JSON object mapping series names to topics; "
              "without it every series goes to the default topic.")
@click.option("--secret-file", "secret_path", metavar="FILE",
              help="File holding the pseudonymization secret (min 16 "
              f"bytes); falls back to ${GATEWAY_SECRET_ENV}.  A trailing "
              "newline is ignored.")
@click.option("--default-topic", default="measurements", show_default=True,
              help="Topic for series absent from the routing table.")
def gateway_start(listen, brokers, routing_path, secret_path, default_topic):
    """Serve the HTTP API until interrupted."""
    path = secret_path or os.environ.get(GATEWAY_SECRET_ENV)
    if not path:
        raise click.UsageError(
            f"--secret-file or ${GATEWAY_SECRET_ENV} must name a file")
    cfg = GatewayConfig(listen=listen,
                        bootstrap=_split_brokers(brokers),
                        secret=_read_secret(path),
                        series_routes=_load_routes(routing_path),
                        default_topic=default_topic).validate()
    loop = RealLoop("gateway")
    network = RealNetwork(loop)
    core = _on_loop(loop, lambda: GatewayCore(loop, network, cfg))
    shell = HttpGateway(core, listen)
    click.echo(f"gateway listening on {listen.rsplit(':', 1)[0]}:{shell.port},"
               f" brokers {', '.join(cfg.bootstrap)}")
    try:
        _serve_until_signal()
    finally:
        shell.close()
        _on_loop(loop, core.stop)
        loop.stop(drain=True)
    click.echo("gateway stopped")


# --------------------------------------------------------------- harness

@cli.group()
def harness():
    """Deterministic simulation runs over virtual time."""


_DURATION_RE = re.compile(r"^(\d+(?:\.\d+)?)(ms|s|m|h)?$")
_DURATION_UNIT_MS = {"ms": 1.0, "s": 1000.0, "m": 60_000.0, "h": 3_600_000.0}


def _parse_duration(text: str) -> float:
    m = _DURATION_RE.match(text.strip())
    if not m:
        raise click.BadParameter(
            f"{text!r} is not a duration (try 60s, 1500ms, 2m)",
            param_hint="--duration")
    return float(m.group(1)) * _DURATION_UNIT_MS[m.group(2) or "s"]


@harness.command("run")
@click.option("--topology", "topology_path", required=True, metavar="FILE",
              help="JSON topology: links, placement, brokers, partitions.")
@click.option("--workload", "workload_path", required=True, metavar="FILE",
              help="JSON workload: devices, rates, bursts, series mix.")
@click.option("--duration", default="60s", show_default=True,
              help="Virtual time to simulate (60s, 1500ms, 2m).")
@click.option("--seed", type=click.IntRange(min=0), default=None,
              help="Override the topology's RNG seed.")
@click.option("--scenario", "scenario_path", metavar="FILE",
              help="JSON list of timed fault injections.")
@click.option("--out", "out_path", default="report.json", show_default=True,
              metavar="FILE", help="Report path; charts and CSVs land "
              "next to it.")
@click.option("--sink-rate-limit", type=float, default=None, metavar="N",
              help="Cap the sink at N records per second.")
@click.option("--run-dir", "run_dir", default=None, metavar="DIR",
              help="Keep broker and sink state in this empty directory "
              "instead of a discarded temp dir.")
def harness_run(topology_path, workload_path, duration, seed, scenario_path,
                out_path, sink_rate_limit, run_dir):
    """Simulate a device/cloudlet/cloud deployment and write a report.

    The run is deterministic: the same inputs and seed produce a
    byte-identical report.json.  Alongside it land backlog.csv,
    latency.csv, backlog.png, and latency.png.
    """
    topology = load_topology(topology_path)
    workload = load_workload(workload_path)
    scenario = load_scenario(scenario_path) if scenario_path else None
    if seed is not None:
        topology = replace(topology, rng_seed=seed)
    duration_ms = _parse_duration(duration)
    report = simulate(topology, workload, duration_ms, scenario,
                      sink_rate_cap=sink_rate_limit, base_dir=run_dir)
    written = write_outputs(report, out_path)
    counts = report["counts"]
    click.echo(f"posted={counts['posted']} stored={counts['stored']} "
               f"lost={counts['lost']} in_flight={counts['in_flight']} "
               f"dead_lettered={counts['dead_lettered']}")
    ack = report["ack_latency"][report["ingest_path"]]
    click.echo(f"ack p50={ack['p50']}ms p99={ack['p99']}ms; "
               f"e2e p50={report['e2e_latency']['p50']}ms; "
               f"backlog peak={report['backlog']['peak']}")
    for p in written:
        click.echo(p)


@harness.command("compare-paths")
@click.option("--topology", "topology_path", required=True, metavar="FILE")
@click.option("--workload", "workload_path", required=True, metavar="FILE")
@click.option("--duration", default="30s", show_default=True)
@click.option("--json", "as_json", is_flag=True,
              help="Print the numbers as JSON.")
def harness_compare_paths(topology_path, workload_path, duration, as_json):
    """Ack latency with the broker beside the devices vs behind the WAN.

    Runs the same workload twice, once with gateway and broker on the
    cloudlet tier and once with both in the cloud, and reports the
    median-ack ratio between the two placements.
    """
    topology = load_topology(topology_path)
    workload = load_workload(workload_path)
    result = compare_paths(topology, workload, _parse_duration(duration))
    numbers = {k: v for k, v in result.items() if k != "reports"}
    if as_json:
        click.echo(json.dumps(numbers, sort_keys=True, indent=2))
        return
    click.echo(f"cloudlet ack: p50={numbers['cloudlet_ack_p50']}ms "
               f"p99={numbers['cloudlet_ack_p99']}ms")
    click.echo(f"cloud ack:    p50={numbers['cloud_ack_p50']}ms "
               f"p99={numbers['cloud_ack_p99']}ms")
    click.echo(f"cloud/cloudlet p50 ratio: {numbers['ratio']:.2f}")


@harness.command("burst-drain")
@click.option("--topology", "topology_path", required=True, metavar="FILE")
@click.option("--workload", "workload_path", required=True, metavar="FILE")
@click.option("--rate-cap", type=float, required=True, metavar="N",
              help="Sink drain cap in records per second.")
@click.option("--duration", default=None,
              help="Simulated time; defaults to just past the last burst.")
@click.option("--json", "as_json", is_flag=True,
              help="Print the numbers as JSON.")
def harness_burst_drain(topology_path, workload_path, rate_cap, duration,
                        as_json):
    """Absorb a burst in the broker and watch the capped sink drain it."""
    topology = load_topology(topology_path)
    workload = load_workload(workload_path)
    duration_ms = _parse_duration(duration) if duration else None
    result = burst_drain(topology, workload, rate_cap,
                         duration_ms=duration_ms)
    numbers = {k: v for k, v in result.items() if k != "report"}
    if as_json:
        click.echo(json.dumps(numbers, sort_keys=True, indent=2))
        return
    click.echo(f"peak backlog: {numbers['peak_backlog']} records")
    click.echo(f"drain time:   {numbers['drain_time_ms']}ms")
    click.echo(f"lost:         {numbers['loss']}")


# ----------------------------------------------------------------- stats

@cli.command("stats")
@_brokers_option
@click.option("--topic", "topic_name", default=None,
              help="Restrict the recent-request ring to one topic.")
@click.option("--since-ms", type=float, default=None,
              help="Restrict the recent-request ring to entries at or "
              "after this epoch-ms timestamp.")
@click.option("--json", "as_json", is_flag=True,
              help="Full per-broker snapshots as JSON.")
def stats(brokers, topic_name, since_ms, as_json):
    """Show request counters and per-topic traffic for every broker."""
    op: dict = {"op": "stats"}
    if topic_name is not None:
        op["topic"] = topic_name
    if since_ms is not None:
        op["since_ms"] = since_ms
    snapshots = {}
    with _client(brokers) as c:
        meta = c.metadata(force=True)
        for bid in sorted(meta.get("brokers", {}), key=int):
            addr = meta["brokers"][bid]
            if addr is None:
                continue
            snapshots[bid] = c.json_op(dict(op), addr=addr)
    if as_json:
        click.echo(json.dumps(snapshots, sort_keys=True, indent=2))
        return
    for bid, snap in snapshots.items():
        role = " (controller)" if snap.get("controller") == int(bid) else ""
        click.echo(f"broker {bid}{role}: clients={snap['connected_clients']}"
                   f" produce={snap['produce_count']}"
                   f" fetch={snap['fetch_count']}"
                   f" errors={snap['error_count']}")
        lat = snap["latency_us"]
        if lat["total"]:
            mean_us = lat["sum_us"] / lat["total"]
            click.echo(f"  request latency: mean={mean_us:.0f}us "
                       f"max={lat['max_us']}us over {lat['total']} requests")
        for name, t in snap["topics"].items():
            click.echo(f"  topic {name}: in={t['messages_in']} msgs"
                       f"/{t['bytes_in']} B out={t['messages_out']} msgs"
                       f"/{t['bytes_out']} B")


def main(argv=None) -> int:
    """Entry point; returns the process exit code."""
    try:
        cli.main(args=argv, prog_name="edgebus", standalone_mode=False)
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.UsageError as e:
        e.show()
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except KeyboardInterrupt:
        return 130
    except EdgebusError as e:
        click.echo(f"error: {_error_text(e)}", err=True)
        return 2
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
