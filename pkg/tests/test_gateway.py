"""Gateway behavior: routing, pseudonymization, error mapping, and the
two shells (real HTTP and frame-level) driving one shared core.
"""

import hashlib
import hmac
import json
import socket
import threading
import urllib.error
import urllib.request
from base64 import b64decode, b64encode

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgebus import wire
from edgebus.broker import BrokerConfig, BrokerNode
from edgebus.client import BrokerClient
from edgebus.errors import InvalidConfig
from edgebus.gateway import (
    GatewayConfig,
    GatewayCore,
    HttpGateway,
    SimGateway,
    canonical_json,
    pseudonymize,
    sim_http_request,
)
from edgebus.runtime import RealLoop, RealNetwork
from edgebus.sim import SimLoop, SimNetwork
from edgebus.topics import fnv1a_32

SECRET = b"\x0b" * 20


def b64(data: bytes) -> str:
    return b64encode(data).decode("ascii")


def test_pseudonym_matches_published_hmac_vector():
    # RFC 4231 test case 1: HMAC-SHA-256(0x0b*20, "Hi There") starts
    # b0344c61d8db3853...; the pseudonym is its first 8 bytes in hex.
    assert pseudonymize(SECRET, "Hi There") == "b0344c61d8db3853"
    full = hmac.new(SECRET, b"Hi There", hashlib.sha256).hexdigest()
    assert full.startswith("b0344c61d8db3853")


def test_pseudonym_varies_with_secret_and_device():
    a = pseudonymize(b"s" * 16, "dev-1")
    assert a == pseudonymize(b"s" * 16, "dev-1")
    assert a != pseudonymize(b"t" * 16, "dev-1")
    assert a != pseudonymize(b"s" * 16, "dev-2")
    assert len(a) == 16 and all(c in "0123456789abcdef" for c in a)


def test_config_rejects_short_secret():
    with pytest.raises(InvalidConfig):
        GatewayConfig(listen="x:1", bootstrap=["b:1"], secret=b"short").validate()


class GatewayWorld:
    """Brokers, the gateway core behind a frame-level shell, and a device
    connection, all on the simulated network."""

    def __init__(self, tmp_path, secret=SECRET, n_brokers=1, **gw_overrides):
        self.loop = SimLoop()
        self.net = SimNetwork(self.loop, seed=11)
        self.tmp = tmp_path
        self.ids = list(range(1, n_brokers + 1))
        self.brokers = {}
        for i in self.ids:
            peers = [(j, f"b{j}:9100", f"b{j}:9000")
                     for j in self.ids if j != i]
            cfg = BrokerConfig(
                broker_id=i, data_dir=str(tmp_path / f"b{i}"),
                client_listen=f"b{i}:9000", peer_listen=f"b{i}:9100",
                peers=peers)
            self.brokers[i] = BrokerNode(cfg, self.loop, self.net.node(f"b{i}"))
            self.brokers[i].start()
        self.gw_config = GatewayConfig(
            listen="gw:8080", bootstrap=[f"b{i}:9000" for i in self.ids],
            secret=secret, **gw_overrides)
        self.core = GatewayCore(self.loop, self.net.node("gw"), self.gw_config)
        self.shell = SimGateway(self.core, self.net.node("gw"), "gw:8080")
        self._corr = 0
        self._replies = {}
        self._chan = None

    def _on_frame(self, _ch, _mt, cid, payload):
        self._replies[cid] = payload

    def send(self, method, path, query=None, body=None) -> int:
        """Fire a request without waiting; returns its correlation id."""
        self._corr += 1
        cid = self._corr
        if self._chan is None or self._chan.closed:
            self._chan = self.net.node("dev").connect("gw:8080")
            self._chan.set_handler(self._on_frame, lambda ch: None)
        self._chan.send(wire.MSG_HTTP, cid,
                        sim_http_request(method, path, query, body))
        return cid

    def wait(self, cid, timeout_ms=30_000.0):
        deadline = self.loop.now_ms() + timeout_ms
        while cid not in self._replies and self.loop.now_ms() < deadline:
            self.loop.run_until(self.loop.now_ms() + 5)
        if cid not in self._replies:
            raise AssertionError("request never answered")
        obj = json.loads(wire.split_response(self._replies.pop(cid)))
        return obj["status"], obj["body"]

    def request(self, method, path, query=None, body=None):
        return self.wait(self.send(method, path, query, body))

    def run(self, ms):
        self.loop.run_until(self.loop.now_ms() + ms)

    def broker_client(self) -> BrokerClient:
        return BrokerClient(self.loop, self.net.node("cl"),
                            [f"b{i}:9000" for i in self.ids])

    def call(self, fn, timeout_ms=30_000.0):
        box = []
        fn(lambda err, result: box.append((err, result)))
        deadline = self.loop.now_ms() + timeout_ms
        while not box and self.loop.now_ms() < deadline:
            self.loop.run_until(self.loop.now_ms() + 5)
        assert box, "callback never fired"
        err, result = box[0]
        if err is not None:
            raise err
        return result

    def restart_gateway(self):
        self.shell.close()
        self.core.stop()
        self._chan = None
        self.core = GatewayCore(self.loop, self.net.node("gw"), self.gw_config)
        self.shell = SimGateway(self.core, self.net.node("gw"), "gw:8080")

    def close(self):
        self.shell.close()
        self.core.stop()
        for node in self.brokers.values():
            if node.running:
                node.stop()


@pytest.fixture
def world(tmp_path):
    w = GatewayWorld(tmp_path)
    status, _ = w.request("POST", "/v1/topics/events",
                          body={"partitions": 4, "replication_factor": 1})
    assert status == 201
    yield w
    w.close()


def test_post_and_get_messages_roundtrip(world):
    status, body = world.request(
        "POST", "/v1/topics/events/messages",
        body={"partition": 2, "records": [
            {"key": b64(b"k1"), "value": b64(b"hello"), "timestamp_ms": 1000},
            {"value": b64(b"unkeyed"), "timestamp_ms": 1001},
        ]})
    assert status == 200
    assert body["offsets"] == [{"partition": 2, "offset": 0},
                               {"partition": 2, "offset": 1}]

    status, body = world.request(
        "GET", "/v1/topics/events/partitions/2/messages", query={"offset": "0"})
    assert status == 200
    assert body["high_watermark"] == 2
    assert body["earliest_offset"] == 0
    recs = body["records"]
    assert [b64decode(r["value"]) for r in recs] == [b"hello", b"unkeyed"]
    assert b64decode(recs[0]["key"]) == b"k1"
    assert "key" not in recs[1]
    assert recs[0]["timestamp_ms"] == 1000
    assert [r["offset"] for r in recs] == [0, 1]


def test_keyed_record_routes_to_fnv_partition(world):
    world.request("POST", "/v1/topics/eight", body={"partitions": 8})
    status, body = world.request(
        "POST", "/v1/topics/eight/messages",
        body={"records": [{"key": b64(b"a"), "value": b64(b"x")}]})
    assert status == 200
    # FNV-1a("a") = 0xE40C292C; mod 8 = 4
    assert fnv1a_32(b"a") % 8 == 4
    assert body["offsets"] == [{"partition": 4, "offset": 0}]


def test_invalid_base64_rejected_with_typed_code(world):
    status, body = world.request(
        "POST", "/v1/topics/events/messages",
        body={"records": [{"value": "!!"}]})
    assert status == 400
    assert body["error"] == "bad_base64"


def test_missing_timestamp_defaults_to_gateway_clock(world):
    world.run(5000)
    now = int(world.loop.now_ms())
    status, _ = world.request(
        "POST", "/v1/topics/events/messages",
        body={"partition": 1, "records": [{"value": b64(b"v")}]})
    assert status == 200
    _, body = world.request("GET", "/v1/topics/events/partitions/1/messages",
                            query={"offset": "0"})
    ts = body["records"][0]["timestamp_ms"]
    assert now <= ts <= now + 1000


def test_fetch_requires_offset_parameter(world):
    status, body = world.request(
        "GET", "/v1/topics/events/partitions/0/messages")
    assert status == 400
    assert body["error"] == "bad_request"
    assert "offset" in body["detail"]


def test_fetch_at_high_watermark_returns_empty(world):
    status, body = world.request(
        "GET", "/v1/topics/events/partitions/0/messages", query={"offset": "0"})
    assert status == 200
    assert body["records"] == []
    assert body["high_watermark"] == 0


def test_measurement_is_pseudonymized_and_canonical(world):
    world.request("POST", "/v1/topics/measurements", body={"partitions": 4})
    status, body = world.request(
        "POST", "/v1/measurements",
        body={"device_id": "Hi There", "series": "air.pm25",
              "timestamp_ms": 1234, "value": 8.25})
    assert status == 202
    assert body["device_pseudonym"] == "b0344c61d8db3853"
    assert body["topic"] == "measurements"
    p, o = body["partition"], body["offset"]

    cl = world.broker_client()
    res = world.call(lambda cb: cl.fetch("measurements", p, o, cb))
    [rec] = res.records
    assert rec.key == b"b0344c61d8db3853"
    # canonical form: sorted keys, no whitespace
    assert rec.value == (b'{"device_pseudonym":"b0344c61d8db3853",'
                         b'"series":"air.pm25","timestamp_ms":1234,'
                         b'"value":8.25}')
    assert rec.timestamp_ms == 1234


def test_measurement_location_and_attributes_round_trip(world):
    world.request("POST", "/v1/topics/measurements", body={"partitions": 2})
    status, body = world.request(
        "POST", "/v1/measurements",
        body={"device_id": "tram-7", "series": "noise", "timestamp_ms": 99,
              "value": 61.5, "lat": 51.1, "lon": 17.03,
              "attributes": {"line": "7", "stop": "rynek"}})
    assert status == 202
    cl = world.broker_client()
    res = world.call(lambda cb: cl.fetch(
        "measurements", body["partition"], body["offset"], cb))
    stored = json.loads(res.records[0].value)
    assert stored["lat"] == 51.1 and stored["lon"] == 17.03
    assert stored["attributes"] == {"line": "7", "stop": "rynek"}
    # canonical encoding is byte-stable: re-serializing reproduces the record
    assert canonical_json(stored) == res.records[0].value


def test_same_device_measurements_share_a_partition(world):
    world.request("POST", "/v1/topics/measurements", body={"partitions": 8})
    seen = set()
    offsets = []
    for i in range(12):
        status, body = world.request(
            "POST", "/v1/measurements",
            body={"device_id": "bus-42", "series": "gps.speed",
                  "timestamp_ms": 1000 + i, "value": float(i)})
        assert status == 202
        seen.add(body["partition"])
        offsets.append(body["offset"])
    assert len(seen) == 1
    assert offsets == sorted(offsets)


def test_measurement_validation_rejects_bad_bodies(world):
    world.request("POST", "/v1/topics/measurements", body={"partitions": 1})
    bad = [
        {"series": "s", "timestamp_ms": 1, "value": 2},   # no device_id
        {"device_id": "", "series": "s", "value": 2},
        {"device_id": "d", "value": 2},                   # no series
        {"device_id": "d", "series": "s"},                # no value
        {"device_id": "d", "series": "s", "value": True},
        {"device_id": "d", "series": "s", "value": "x"},
        {"device_id": "d", "series": "s", "value": float("nan")},
        {"device_id": "d", "series": "s", "value": float("inf")},
        {"device_id": "d", "series": "s", "value": 1, "lat": 10.0},
        {"device_id": "d", "series": "s", "value": 1, "lat": 95.0, "lon": 0.0},
        {"device_id": "d", "series": "s", "value": 1, "lat": 0.0, "lon": 181.0},
        {"device_id": "d", "series": "s", "value": 1, "attributes": {"k": 1}},
    ]
    for payload in bad:
        status, body = world.request("POST", "/v1/measurements", body=payload)
        assert status == 400, payload
        assert body["error"] in ("bad_request",), payload


def test_series_routing_table_is_strict_when_configured(tmp_path):
    w = GatewayWorld(tmp_path, series_routes={"noise": "city.noise"})
    try:
        w.request("POST", "/v1/topics/city.noise", body={"partitions": 2})
        status, body = w.request(
            "POST", "/v1/measurements",
            body={"device_id": "d1", "series": "noise",
                  "timestamp_ms": 5, "value": 1.0})
        assert status == 202
        assert body["topic"] == "city.noise"
        status, body = w.request(
            "POST", "/v1/measurements",
            body={"device_id": "d1", "series": "pm25",
                  "timestamp_ms": 5, "value": 1.0})
        assert status == 400
        assert body["error"] == "unknown_series"
    finally:
        w.close()


def test_error_statuses_map_from_broker_errors(world):
    status, body = world.request(
        "POST", "/v1/topics/nowhere/messages",
        body={"records": [{"value": b64(b"v")}]})
    assert status == 404
    assert body["error"] == "unknown_topic"

    status, body = world.request("POST", "/v1/topics/events",
                                 body={"partitions": 4})
    assert status == 409
    assert body["error"] == "topic_exists"

    status, body = world.request(
        "GET", "/v1/topics/events/partitions/1/messages",
        query={"offset": "999"})
    assert status == 416
    assert body["error"] == "offset_out_of_range"
    assert body["earliest_offset"] == 0

    status, _ = world.request("GET", "/v1/nope")
    assert status == 404
    status, _ = world.request("POST", "/v1/topics/events/messages",
                              body={"records": "not-a-list"})
    assert status == 400
    status, _ = world.request("POST", "/v1/topics/events/messages")
    assert status == 400


def test_long_poll_get_wakes_on_new_data(world):
    cid = world.send("GET", "/v1/topics/events/partitions/3/messages",
                     query={"offset": "0", "wait_ms": "8000"})
    world.run(500)
    assert cid not in world._replies  # still parked
    world.request("POST", "/v1/topics/events/messages",
                  body={"partition": 3, "records": [{"value": b64(b"wake")}]})
    t0 = world.loop.now_ms()
    status, body = world.wait(cid)
    assert status == 200
    assert [b64decode(r["value"]) for r in body["records"]] == [b"wake"]
    assert world.loop.now_ms() - t0 < 1000  # woke on commit, not timeout


def test_gateway_restart_is_invisible_to_clients(world):
    world.request("POST", "/v1/topics/events/messages",
                  body={"partition": 0, "records": [{"value": b64(b"before")}]})
    world.restart_gateway()
    status, body = world.request(
        "GET", "/v1/topics/events/partitions/0/messages", query={"offset": "0"})
    assert status == 200
    assert [b64decode(r["value"]) for r in body["records"]] == [b"before"]


def test_stats_marks_dead_brokers_unreachable(tmp_path):
    w = GatewayWorld(tmp_path, n_brokers=2)
    try:
        w.request("POST", "/v1/topics/t", body={"partitions": 1})
        w.request("POST", "/v1/topics/t/messages",
                  body={"records": [{"value": b64(b"x")}]})
        status, body = w.request("GET", "/v1/stats")
        assert status == 200
        assert set(body["brokers"]) == {"1", "2"}
        assert body["gateway"]["produced_records"] == 1
        produced = sum(b.get("produce_count", 0)
                       for b in body["brokers"].values())
        assert produced == 1

        w.brokers[2].stop(abrupt=True)
        status, body = w.request("GET", "/v1/stats")
        assert status == 200
        assert body["brokers"]["2"] == {"unreachable": True}
        assert "produce_count" in body["brokers"]["1"]
    finally:
        w.close()


def test_raw_device_ids_never_reach_disk(world, tmp_path):
    world.request("POST", "/v1/topics/measurements", body={"partitions": 4})
    ids = [f"imei-86045003{i:07d}" for i in range(10)]
    for i, device in enumerate(ids):
        status, _ = world.request(
            "POST", "/v1/measurements",
            body={"device_id": device, "series": "noise.db",
                  "timestamp_ms": 1000 + i, "value": 42.0})
        assert status == 202
    world.close()  # flush and release everything before scanning
    hits = []
    for f in sorted((tmp_path / "b1").rglob("*")):
        if f.is_file():
            blob = f.read_bytes()
            hits += [(f.name, d) for d in ids if d.encode() in blob]
    assert hits == []


class _FidelityWorld:
    """Module-scoped world so the property test reuses one stack."""

    _instance = None

    @classmethod
    def get(cls, tmp_factory):
        if cls._instance is None:
            w = GatewayWorld(tmp_factory.mktemp("fidelity"))
            w.request("POST", "/v1/topics/bytes", body={"partitions": 1})
            cls._instance = w
        return cls._instance


@settings(max_examples=60, deadline=None)
@given(value=st.binary(min_size=0, max_size=2048))
def test_value_bytes_survive_the_gateway_exactly(value, tmp_path_factory):
    w = _FidelityWorld.get(tmp_path_factory)
    status, body = w.request(
        "POST", "/v1/topics/bytes/messages",
        body={"partition": 0, "records": [{"value": b64(value)}]})
    assert status == 200
    offset = body["offsets"][0]["offset"]
    status, body = w.request(
        "GET", "/v1/topics/bytes/partitions/0/messages",
        query={"offset": str(offset), "max_records": "1"})
    assert status == 200
    assert b64decode(body["records"][0]["value"]) == value


def _free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def _http(method, url, body=None):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url, data=data, method=method)
    if data:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


def test_real_http_shell_serves_the_same_core(tmp_path):
    loop = RealLoop()
    net = RealNetwork(loop)
    bport = _free_port()
    cfg = BrokerConfig(
        broker_id=1, data_dir=str(tmp_path / "b1"),
        client_listen=f"127.0.0.1:{bport}",
        peer_listen=f"127.0.0.1:{_free_port()}", peers=[])
    broker = None
    core = None
    shell = None

    def on_loop(fn):
        box, done = [], threading.Event()
        loop.post(lambda: (box.append(fn()), done.set()))
        assert done.wait(10)
        return box[0]

    try:
        def start_broker():
            b = BrokerNode(cfg, loop, net)
            b.start()
            return b
        broker = on_loop(start_broker)
        gw_cfg = GatewayConfig(listen="127.0.0.1:0",
                               bootstrap=[f"127.0.0.1:{bport}"],
                               secret=SECRET)
        core = on_loop(lambda: GatewayCore(loop, net, gw_cfg))
        shell = HttpGateway(core, "127.0.0.1:0")
        base = f"http://127.0.0.1:{shell.port}"

        status, _ = _http("POST", f"{base}/v1/topics/city",
                          body={"partitions": 2})
        assert status == 201
        status, body = _http("POST", f"{base}/v1/topics/city/messages",
                             body={"partition": 1,
                                   "records": [{"key": b64(b"k"),
                                                "value": b64(b"over tcp")}]})
        assert status == 200
        assert body["offsets"] == [{"partition": 1, "offset": 0}]
        status, body = _http(
            "GET", f"{base}/v1/topics/city/partitions/1/messages?offset=0")
        assert status == 200
        assert [b64decode(r["value"]) for r in body["records"]] == [b"over tcp"]
        status, _ = _http("POST", f"{base}/v1/topics/measurements",
                          body={"partitions": 2})
        assert status == 201
        status, body = _http(
            "POST", f"{base}/v1/measurements",
            body={"device_id": "Hi There", "series": "pm25", "value": 3.5})
        assert status == 202
        assert body["device_pseudonym"] == "b0344c61d8db3853"
        status, _ = _http("GET", f"{base}/v1/nonsense")
        assert status == 404
    finally:
        if shell is not None:
            shell.close()
        fin = threading.Event()

        def teardown():
            if core is not None:
                core.stop()
            if broker is not None and broker.running:
                broker.stop()
            fin.set()
        loop.post(teardown)
        fin.wait(10)
        loop.stop(drain=True)
