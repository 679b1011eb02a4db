"""Command suite behavior: exit codes, output formats, and that every
subcommand is a thin shell over the same operations the library exposes.

Most tests drive main() in-process against a broker running on a real
loop in this process.  One subprocess test exercises the actual entry
point end to end including signal-driven shutdown.
"""

import base64
import csv
import io
import json
import os
import signal
import socket
import subprocess
import sys
import threading
import time
from contextlib import redirect_stderr, redirect_stdout

import pytest

from edgebus.broker import BrokerConfig, BrokerNode
from edgebus.cli import cli as cli_group
from edgebus.cli import main
from edgebus.runtime import RealLoop, RealNetwork
from edgebus.topics import fnv1a_32
from edgebus.tsstore import StoredPoint, TsStore


def _free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def run_cli(argv, stdin_text: str | None = None):
    """Invoke the entry point in-process; returns (code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    old_stdin = sys.stdin
    if stdin_text is not None:
        sys.stdin = io.StringIO(stdin_text)
    try:
        with redirect_stdout(out), redirect_stderr(err):
            code = main(argv)
    finally:
        sys.stdin = old_stdin
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def cluster(tmp_path_factory):
    """One broker on real TCP, shared by the module's tests."""
    loop = RealLoop("cli-test-broker")
    net = RealNetwork(loop)
    port = _free_port()
    cfg = BrokerConfig(
        broker_id=1,
        data_dir=str(tmp_path_factory.mktemp("cli-broker")),
        client_listen=f"127.0.0.1:{port}",
        peer_listen=f"127.0.0.1:{_free_port()}",
        peers=[])

    def on_loop(fn):
        box, done = [None], threading.Event()

        def call():
            box[0] = fn()
            done.set()
        loop.post(call)
        assert done.wait(10)
        return box[0]

    def boot():
        node = BrokerNode(cfg, loop, net)
        node.start()
        return node

    node = on_loop(boot)
    yield f"127.0.0.1:{port}"
    on_loop(lambda: node.stop() if node.running else None)
    loop.stop(drain=True)


# ------------------------------------------------------------ structure

def test_help_lists_every_subcommand():
    code, out, _ = run_cli(["--help"])
    assert code == 0
    for name in ("broker", "topic", "produce", "consume", "sink",
                 "gateway", "harness", "stats"):
        assert name in out


def _walk_commands(group, path):
    for name, sub in group.commands.items():
        if hasattr(sub, "commands"):
            yield from _walk_commands(sub, path + [name])
        else:
            yield path + [name], sub


def test_every_subcommand_documents_all_flags_in_help():
    for path, command in _walk_commands(cli_group, []):
        code, out, _ = run_cli(path + ["--help"])
        assert code == 0, path
        for param in command.params:
            flag = max(param.opts, key=len)
            if flag.startswith("--"):
                assert flag in out, (path, flag)


def test_no_subcommand_is_a_usage_error():
    code, _, _ = run_cli([])
    assert code == 1


def test_unknown_subcommand_is_a_usage_error():
    code, _, err = run_cli(["fnord"])
    assert code == 1
    assert "fnord" in err


# --------------------------------------------------------------- topics

def test_topic_create_list_describe(cluster):
    code, out, _ = run_cli(["topic", "create", "city", "--brokers", cluster,
                            "--partitions", "2"])
    assert code == 0
    assert "city" in out and "2 partitions" in out

    code, out, _ = run_cli(["topic", "list", "--brokers", cluster])
    assert code == 0
    assert any(line.startswith("city\t") for line in out.splitlines())

    code, out, _ = run_cli(["topic", "list", "--brokers", cluster, "--json"])
    assert code == 0
    snapshot = json.loads(out)
    city = next(t for t in snapshot if t["name"] == "city")
    assert city["partition_count"] == 2

    code, out, _ = run_cli(["topic", "describe", "city",
                            "--brokers", cluster])
    assert code == 0
    assert "partition 0" in out and "partition 1" in out

    code, out, _ = run_cli(["topic", "describe", "city",
                            "--brokers", cluster, "--json"])
    assert code == 0
    body = json.loads(out)
    assert len(body["partitions"]) == 2
    assert all(p["leader"] == 1 for p in body["partitions"])


def test_topic_describe_unknown_is_a_runtime_error(cluster):
    code, _, err = run_cli(["topic", "describe", "ghost",
                            "--brokers", cluster])
    assert code == 2
    assert "unknown topic" in err


# ------------------------------------------------- produce and consume

def test_produce_prints_partition_offset_per_line(cluster):
    run_cli(["topic", "create", "plines", "--brokers", cluster])
    code, out, _ = run_cli(["produce", "plines", "--brokers", cluster],
                           stdin_text="hello\n")
    assert code == 0
    assert out == "0:0\n"

    code, out, _ = run_cli(["produce", "plines", "--brokers", cluster],
                           stdin_text="a\nb\nc\n")
    assert code == 0
    assert out == "0:1\n0:2\n0:3\n"


@pytest.fixture(scope="module")
def notes_topic(cluster):
    """A topic pre-loaded with four unkeyed records."""
    assert run_cli(["topic", "create", "notes", "--brokers", cluster])[0] == 0
    code, out, _ = run_cli(["produce", "notes", "--brokers", cluster],
                           stdin_text="hello\na\nb\nc\n")
    assert code == 0 and len(out.splitlines()) == 4
    return "notes"


def test_consume_prints_offset_tab_key_tab_value(cluster, notes_topic):
    code, out, _ = run_cli(["consume", notes_topic, "--brokers", cluster,
                            "--no-wait"])
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "0\t\thello"
    assert lines[1:] == ["1\t\ta", "2\t\tb", "3\t\tc"]


def test_consume_never_persists_a_position(cluster, notes_topic):
    first = run_cli(["consume", notes_topic, "--brokers", cluster,
                     "--no-wait"])
    second = run_cli(["consume", notes_topic, "--brokers", cluster,
                      "--no-wait"])
    assert first == second
    assert first[1].startswith("0\t")


def test_consume_max_limits_output(cluster, notes_topic):
    code, out, _ = run_cli(["consume", notes_topic, "--brokers", cluster,
                            "--max", "2"])
    assert code == 0
    assert len(out.splitlines()) == 2


def test_consume_beyond_log_end_shows_valid_range(cluster, notes_topic):
    code, _, err = run_cli(["consume", notes_topic, "--brokers", cluster,
                            "--from", "100", "--no-wait"])
    assert code == 2
    assert "offset out of range" in err
    assert "earliest_offset=0" in err and "next_offset=4" in err


def test_produce_key_separator_routes_by_key(cluster):
    run_cli(["topic", "create", "keyed", "--brokers", cluster,
             "--partitions", "4"])
    code, out, _ = run_cli(["produce", "keyed", "--brokers", cluster,
                            "--key-separator", "="],
                           stdin_text="k1=first\nk1=second\n")
    assert code == 0
    expected_partition = fnv1a_32(b"k1") % 4
    assert out == (f"{expected_partition}:0\n{expected_partition}:1\n")

    code, out, _ = run_cli(["consume", "keyed", "--brokers", cluster,
                            "--partition", str(expected_partition),
                            "--no-wait"])
    assert code == 0
    assert out == "0\tk1\tfirst\n1\tk1\tsecond\n"


def test_produce_explicit_partition(cluster):
    run_cli(["topic", "create", "pinned", "--brokers", cluster,
             "--partitions", "3"])
    code, out, _ = run_cli(["produce", "pinned", "--brokers", cluster,
                            "--partition", "2"], stdin_text="x\n")
    assert code == 0
    assert out == "2:0\n"


def test_produce_unknown_topic_exits_2(cluster):
    code, _, err = run_cli(["produce", "ghost", "--brokers", cluster],
                           stdin_text="x\n")
    assert code == 2
    assert "unknown topic" in err


def test_base64_round_trips_exact_bytes(cluster):
    run_cli(["topic", "create", "blobs", "--brokers", cluster])
    payload = b"\x00\x01\ttab\nnewline\xff"
    encoded = base64.b64encode(payload).decode("ascii")
    code, out, _ = run_cli(["produce", "blobs", "--brokers", cluster,
                            "--base64"], stdin_text=encoded + "\n")
    assert code == 0

    code, out, _ = run_cli(["consume", "blobs", "--brokers", cluster,
                            "--no-wait", "--base64"])
    assert code == 0
    offset, key, value = out.splitlines()[0].split("\t")
    assert (offset, key) == ("0", "")
    assert base64.b64decode(value) == payload


def test_produce_rejects_bad_base64(cluster):
    code, _, err = run_cli(["produce", "blobs", "--brokers", cluster,
                            "--base64"], stdin_text="not base64!!\n")
    assert code == 2
    assert "base64" in err


def test_unreachable_broker_exits_2():
    code, _, err = run_cli(["topic", "list",
                            "--brokers", f"127.0.0.1:{_free_port()}"])
    assert code == 2
    assert err.startswith("error:")


# ----------------------------------------------------------------- stats

def test_stats_reports_traffic(cluster):
    run_cli(["topic", "create", "metered", "--brokers", cluster])
    code, _, _ = run_cli(["produce", "metered", "--brokers", cluster],
                         stdin_text="one\ntwo\n")
    assert code == 0

    code, out, _ = run_cli(["stats", "--brokers", cluster])
    assert code == 0
    assert "broker 1 (controller)" in out
    assert "topic metered" in out

    code, out, _ = run_cli(["stats", "--brokers", cluster, "--json"])
    assert code == 0
    snap = json.loads(out)["1"]
    assert snap["produce_count"] >= 2
    assert snap["topics"]["metered"]["messages_in"] == 2


# ------------------------------------------------------------ sink query

@pytest.fixture()
def store_dir(tmp_path):
    store = TsStore(tmp_path / "ts")
    day = 86_400_000
    store.upsert("pm25", [
        StoredPoint(timestamp_ms=day + 1000, device_pseudonym="aa",
                    source=(0, 0), value=4.5, lat=48.2, lon=16.4),
        StoredPoint(timestamp_ms=day + 2000, device_pseudonym="bb",
                    source=(0, 1), value=7.25),
        StoredPoint(timestamp_ms=2 * day + 500, device_pseudonym="aa",
                    source=(0, 2), value=9.0),
    ])
    store.flush()
    store.close()
    return str(tmp_path / "ts")


def test_sink_query_plain_csv_json_agree(store_dir):
    args = ["sink", "query", "--store", store_dir, "--series", "pm25",
            "--from", "1970-01-02T00:00:00Z", "--to", "1970-01-03T00:00:00Z"]
    code, plain, _ = run_cli(args)
    assert code == 0
    assert len(plain.splitlines()) == 2
    assert "\taa\t4.5\t48.2,16.4" in plain.splitlines()[0]

    code, out, _ = run_cli(args + ["--csv"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["device_pseudonym"] for r in rows] == ["aa", "bb"]
    assert rows[0]["value"] == "4.5" and rows[1]["lat"] == ""

    code, out, _ = run_cli(args + ["--json"])
    assert code == 0
    points = json.loads(out)
    assert points[0] == {"timestamp_ms": 86_400_000 + 1000,
                         "device_pseudonym": "aa", "value": 4.5,
                         "lat": 48.2, "lon": 16.4}
    assert points[1]["lat"] is None


def test_sink_query_half_open_range(store_dir):
    # end is exclusive: a point exactly at --to stays out
    code, out, _ = run_cli(["sink", "query", "--store", store_dir,
                            "--series", "pm25",
                            "--from", "1970-01-02T00:00:01Z",
                            "--to", "1970-01-02T00:00:02Z"])
    assert code == 0
    assert len(out.splitlines()) == 1 and "\taa\t" in out


def test_sink_query_naive_time_is_utc(store_dir):
    zulu = run_cli(["sink", "query", "--store", store_dir, "--series",
                    "pm25", "--from", "1970-01-02T00:00:00Z",
                    "--to", "1970-01-04T00:00:00Z"])
    naive = run_cli(["sink", "query", "--store", store_dir, "--series",
                     "pm25", "--from", "1970-01-02T00:00:00",
                     "--to", "1970-01-04T00:00:00"])
    assert zulu == naive
    assert len(zulu[1].splitlines()) == 3


def test_sink_query_usage_errors(store_dir):
    base = ["sink", "query", "--store", store_dir, "--series", "pm25"]
    code, _, _ = run_cli(base + ["--from", "1970-01-02T00:00:00Z",
                                 "--to", "1970-01-03T00:00:00Z",
                                 "--json", "--csv"])
    assert code == 1
    code, _, err = run_cli(base + ["--from", "yesterday",
                                   "--to", "1970-01-03T00:00:00Z"])
    assert code == 1
    assert "ISO 8601" in err
    code, _, _ = run_cli(base + ["--from", "1970-01-03T00:00:00Z",
                                 "--to", "1970-01-02T00:00:00Z"])
    assert code == 1


def test_sink_query_unknown_series_exits_2(store_dir):
    code, _, err = run_cli(["sink", "query", "--store", store_dir,
                            "--series", "nope",
                            "--from", "1970-01-02T00:00:00Z",
                            "--to", "1970-01-03T00:00:00Z"])
    assert code == 2
    assert "series" in err


def test_sink_run_requires_topics():
    code, _, _ = run_cli(["sink", "run", "--topics", " ",
                          "--store", "/tmp/nowhere"])
    assert code == 1


# ------------------------------------------------- config and environment

def test_broker_start_without_config_is_usage_error(monkeypatch):
    monkeypatch.delenv("CLOUDLET_BROKER_CONFIG", raising=False)
    code, _, err = run_cli(["broker", "start"])
    assert code == 1
    assert "CLOUDLET_BROKER_CONFIG" in err


def test_broker_start_flag_beats_environment(monkeypatch, tmp_path):
    # env points at a missing file; the flag's broken file must win
    monkeypatch.setenv("CLOUDLET_BROKER_CONFIG", str(tmp_path / "missing"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    code, _, err = run_cli(["broker", "start", "--config", str(bad)])
    assert code == 2
    assert "not valid JSON" in err


def test_broker_start_rejects_malformed_peers(tmp_path):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps({
        "broker_id": 1, "data_dir": str(tmp_path / "d"),
        "client_listen": "127.0.0.1:1", "peer_listen": "127.0.0.1:2",
        "peers": [[2, "only-two-fields"]]}), encoding="utf-8")
    code, _, err = run_cli(["broker", "start", "--config", str(cfg)])
    assert code == 2
    assert "peer" in err


def test_broker_start_rejects_unknown_config_keys(tmp_path):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps({
        "broker_id": 1, "data_dir": str(tmp_path / "d"),
        "client_listen": "127.0.0.1:1", "peer_listen": "127.0.0.1:2",
        "bogus_knob": 7}), encoding="utf-8")
    code, _, err = run_cli(["broker", "start", "--config", str(cfg)])
    assert code == 2
    assert "bad broker config" in err


def test_gateway_start_without_secret_is_usage_error(monkeypatch):
    monkeypatch.delenv("CLOUDLET_GATEWAY_SECRET_FILE", raising=False)
    code, _, err = run_cli(["gateway", "start"])
    assert code == 1
    assert "CLOUDLET_GATEWAY_SECRET_FILE" in err


def test_gateway_start_rejects_short_secret(tmp_path):
    secret = tmp_path / "secret"
    secret.write_bytes(b"short\n")
    code, _, err = run_cli(["gateway", "start",
                            "--secret-file", str(secret)])
    assert code == 2
    assert "16" in err


# ---------------------------------------------------------------- harness

@pytest.fixture()
def sim_files(tmp_path):
    topo = tmp_path / "topo.json"
    topo.write_text(json.dumps({
        "links": {"device_cloudlet": {"one_way_latency_ms": 5.0},
                  "device_cloud": {"one_way_latency_ms": 100.0},
                  "cloudlet_cloud": {"one_way_latency_ms": 40.0}},
        "partitions": 2, "rng_seed": 11}), encoding="utf-8")
    load = tmp_path / "load.json"
    load.write_text(json.dumps({
        "device_count": 6, "base_rate_per_device_hz": 2.0}),
        encoding="utf-8")
    return str(topo), str(load)


def test_harness_run_writes_report_and_charts(tmp_path, sim_files):
    topo, load = sim_files
    out = tmp_path / "results" / "report.json"
    code, text, _ = run_cli(["harness", "run", "--topology", topo,
                             "--workload", load, "--duration", "2s",
                             "--out", str(out)])
    assert code == 0
    assert "posted=" in text and "backlog peak=" in text
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["v"] == 1
    assert report["counts"]["posted"] > 0
    assert report["conservation"]["balanced"] is True
    for sibling in ("backlog.csv", "latency.csv", "backlog.png",
                    "latency.png"):
        assert (out.parent / sibling).exists()


def test_harness_run_seed_flag_pins_the_outcome(tmp_path, sim_files):
    topo, load = sim_files
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name / "report.json"
        code, _, _ = run_cli(["harness", "run", "--topology", topo,
                              "--workload", load, "--duration", "2s",
                              "--seed", "99", "--out", str(out)])
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]

    out = tmp_path / "c" / "report.json"
    run_cli(["harness", "run", "--topology", topo, "--workload", load,
             "--duration", "2s", "--seed", "100", "--out", str(out)])
    assert out.read_bytes() != outs[0]


def test_harness_duration_must_parse(sim_files):
    topo, load = sim_files
    code, _, err = run_cli(["harness", "run", "--topology", topo,
                            "--workload", load, "--duration", "soon"])
    assert code == 1
    assert "duration" in err

    code, _, err = run_cli(["harness", "run", "--topology", topo,
                            "--workload", load, "--duration", "2x"])
    assert code == 1


def test_harness_missing_topology_file_exits_2(tmp_path, sim_files):
    _, load = sim_files
    code, _, err = run_cli(["harness", "run",
                            "--topology", str(tmp_path / "absent.json"),
                            "--workload", load])
    assert code == 2


def test_compare_paths_reports_the_placement_gap(tmp_path, sim_files):
    topo, load = sim_files
    code, out, _ = run_cli(["harness", "compare-paths", "--topology", topo,
                            "--workload", load, "--duration", "2s",
                            "--json"])
    assert code == 0
    numbers = json.loads(out)
    assert numbers["cloud_ack_p50"] > numbers["cloudlet_ack_p50"]
    assert numbers["ratio"] > 5.0
    assert "reports" not in numbers


def test_burst_drain_requires_rate_cap(sim_files):
    topo, load = sim_files
    code, _, _ = run_cli(["harness", "burst-drain", "--topology", topo,
                          "--workload", load])
    assert code == 1


# ------------------------------------------------------------ subprocess

def test_entry_point_serves_and_shuts_down_cleanly(tmp_path):
    """broker start in a real process: lock file appears, the CLI can talk
    to it, SIGINT ends it with exit 0."""
    port = _free_port()
    data_dir = tmp_path / "b1"
    cfg = tmp_path / "b1.json"
    cfg.write_text(json.dumps({
        "broker_id": 1, "data_dir": str(data_dir),
        "client_listen": f"127.0.0.1:{port}",
        "peer_listen": f"127.0.0.1:{_free_port()}",
        "peers": []}), encoding="utf-8")
    env = dict(os.environ, CLOUDLET_BROKER_CONFIG=str(cfg))
    proc = subprocess.Popen(
        [sys.executable, "-m", "edgebus.cli", "broker", "start"],
        env=env, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
        text=True)
    try:
        deadline = time.time() + 15
        while time.time() < deadline:
            code, out, _ = run_cli(["topic", "list",
                                    "--brokers", f"127.0.0.1:{port}"])
            if code == 0:
                break
            time.sleep(0.2)
        else:
            pytest.fail("broker subprocess never became reachable")
        assert (data_dir / ".lock").exists()
        code, out, _ = run_cli(["topic", "create", "sub", "--brokers",
                                f"127.0.0.1:{port}"])
        assert code == 0
    finally:
        proc.send_signal(signal.SIGINT)
        out, _ = proc.communicate(timeout=15)
    assert proc.returncode == 0
    assert "broker 1 stopped" in out
