"""HTTP gateway for mobile producers and consumers.

GatewayCore is transport-neutral: it turns (method, path, query, body)
into broker operations and answers through a respond callback.  Two
shells feed it:

    HttpGateway   a real threaded HTTP server; handler threads post the
                  request onto the loop and block until the core
                  responds
    SimGateway    frame-level HTTP for simulated topologies (MSG_HTTP
                  carries a JSON request, the reply rides the usual ack
                  frame), so simulated devices exercise the exact same
                  core

Record keys and values travel as base64 inside JSON: one encoding for
every client, binary-safe, and trivially diffable in tests.

Privacy: devices authenticate however the operator likes upstream; what
lands in the log is a pseudonym, the first 8 bytes (16 hex chars) of
HMAC-SHA-256(secret, device_id).  The raw device id exists only inside
the request handler and is never stored, logged, or echoed back.  The
pseudonym doubles as the partition key, so one device's measurements
stay totally ordered.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import math
import threading
from base64 import b64decode, b64encode
from dataclasses import dataclass, field
from urllib.parse import parse_qsl, urlsplit

from . import wire
from .client import BrokerClient
from .errors import (
    BadBase64,
    BadRequest,
    EdgebusError,
    InvalidConfig,
    MessageTooLarge,
    UnknownSeries,
)

DEFAULT_PAGE = 500
MAX_PAGE = 5000
MAX_WAIT_MS = 30_000
REFRESH_INTERVAL_MS = 10_000.0
MIN_SECRET_BYTES = 16


def pseudonymize(secret: bytes, device_id: str) -> str:
    """Stable 16-hex-char pseudonym for a device id."""
    mac = hmac.new(secret, device_id.encode("utf-8"), hashlib.sha256)
    return mac.hexdigest()[:16]


def canonical_json(obj: dict) -> bytes:
    """Deterministic bytes: sorted keys, no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class GatewayConfig:
    listen: str
    bootstrap: list[str]
    secret: bytes
    # series -> topic; an empty table routes every series to default_topic
    series_routes: dict[str, str] = field(default_factory=dict)
    default_topic: str = "measurements"
    max_body_bytes: int = 4 << 20
    produce_attempts: int = 3

    def validate(self) -> "GatewayConfig":
        if len(self.secret) < MIN_SECRET_BYTES:
            raise InvalidConfig(
                f"pseudonym secret must be at least {MIN_SECRET_BYTES} bytes")
        if not self.bootstrap:
            raise InvalidConfig("gateway needs at least one broker address")
        return self

    def topic_for_series(self, series: str) -> str:
        if not self.series_routes:
            return self.default_topic
        try:
            return self.series_routes[series]
        except KeyError:
            raise UnknownSeries(f"series {series!r} has no route") from None


_STATUS_BY_CODE = {
    "unknown_topic": 404,
    "unknown_partition": 404,
    "unknown_series": 400,
    "topic_exists": 409,
    "offset_out_of_range": 416,
    "message_too_large": 413,
    "bad_request": 400,
    "bad_base64": 400,
    "invalid_config": 400,
    "not_leader": 503,
    "broker_unavailable": 503,
    "request_timeout": 503,
    "no_viable_leader": 503,
    "insufficient_brokers": 503,
}


def _b64_decode(rec: dict, name: str) -> bytes | None:
    v = rec.get(name)
    if v is None:
        return None
    if not isinstance(v, str):
        raise BadRequest(f"{name} must be a base64 string")
    try:
        return b64decode(v, validate=True)
    except (ValueError, TypeError):
        raise BadBase64(f"{name} is not valid base64") from None


class GatewayCore:
    """Routes HTTP-shaped requests to the broker client.  Runs on the loop
    thread; `respond(status, obj)` is called exactly once per request."""

    def __init__(self, loop, network, config: GatewayConfig):
        self.loop = loop
        self.cfg = config.validate()
        self.client = BrokerClient(loop, network, config.bootstrap)
        self.counters = {
            "requests": 0,
            "produced_records": 0,
            "measurements_accepted": 0,
            "fetched_records": 0,
            "client_errors": 0,
            "upstream_errors": 0,
        }
        self._refresh_timer = None
        self.stopped = False
        self._schedule_refresh()

    def _schedule_refresh(self):
        def fire():
            if self.stopped:
                return
            # drop the cached topology so leadership moves are noticed
            # even when nothing has failed loudly
            self.client.invalidate_metadata()
            self._schedule_refresh()
        self._refresh_timer = self.loop.call_later(REFRESH_INTERVAL_MS, fire)

    def stop(self):
        self.stopped = True
        if self._refresh_timer is not None:
            self._refresh_timer.cancel()
        self.client.close()

    # -- entry point -------------------------------------------------------

    def handle(self, method: str, path: str, query: dict, body: bytes, respond):
        self.counters["requests"] += 1

        def respond_once(status: int, obj: dict):
            if status >= 500:
                self.counters["upstream_errors"] += 1
            elif status >= 400:
                self.counters["client_errors"] += 1
            respond(status, obj)

        try:
            self._route(method, path, query, body, respond_once)
        except EdgebusError as e:
            respond_once(_STATUS_BY_CODE.get(e.code, 500), e.to_dict())
        except Exception as e:  # defensive: a handler bug must not kill the loop
            respond_once(500, {"error": "internal", "detail": f"{type(e).__name__}: {e}"})

    def _route(self, method, path, query, body, respond):
        if body and len(body) > self.cfg.max_body_bytes:
            raise MessageTooLarge(
                f"body exceeds {self.cfg.max_body_bytes} bytes")
        parts = [p for p in path.split("/") if p]
        if parts[:1] != ["v1"]:
            self._not_found(path, respond)
            return
        rest = parts[1:]
        if method == "POST" and len(rest) == 3 and rest[0] == "topics" \
                and rest[2] == "messages":
            self._post_messages(rest[1], body, respond)
        elif method == "GET" and len(rest) == 5 and rest[0] == "topics" \
                and rest[2] == "partitions" and rest[4] == "messages":
            self._get_messages(rest[1], rest[3], query, respond)
        elif method == "POST" and rest == ["measurements"]:
            self._post_measurement(body, respond)
        elif method == "GET" and rest == ["stats"]:
            self._get_stats(query, respond)
        elif method == "POST" and len(rest) == 2 and rest[0] == "topics":
            self._post_topic(rest[1], body, respond)
        else:
            self._not_found(path, respond)

    def _not_found(self, path, respond):
        respond(404, {"error": "not_found", "detail": f"no route for {path}"})

    @staticmethod
    def _json_body(body: bytes) -> dict:
        if not body:
            raise BadRequest("request body must be JSON")
        try:
            obj = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise BadRequest(f"invalid JSON body: {e}") from None
        if not isinstance(obj, dict):
            raise BadRequest("JSON body must be an object")
        return obj

    # -- producing ---------------------------------------------------------

    def _post_messages(self, topic: str, body: bytes, respond):
        obj = self._json_body(body)
        raw_records = obj.get("records")
        if not isinstance(raw_records, list) or not raw_records:
            raise BadRequest("body needs a non-empty records array")
        now = int(self.loop.now_ms())
        entries = []
        for rec in raw_records:
            if not isinstance(rec, dict):
                raise BadRequest("each record must be an object")
            key = _b64_decode(rec, "key")
            value = _b64_decode(rec, "value")
            if value is None:
                raise BadRequest("each record needs a value")
            ts = rec.get("timestamp_ms", now)
            if not isinstance(ts, int):
                raise BadRequest("timestamp_ms must be an integer")
            entries.append((key, value, ts))
        partition = obj.get("partition", -1)
        if not isinstance(partition, int):
            raise BadRequest("partition must be an integer")

        def done(err, offsets):
            if err is not None:
                respond(_STATUS_BY_CODE.get(err.code, 503), err.to_dict())
                return
            self.counters["produced_records"] += len(entries)
            respond(200, {"offsets": [
                {"partition": p, "offset": o} for p, o in offsets]})
        self.client.produce(topic, partition, entries, done,
                            attempts=self.cfg.produce_attempts)

    def _post_measurement(self, body: bytes, respond):
        obj = self._json_body(body)
        device_id = obj.get("device_id")
        series = obj.get("series")
        if not isinstance(device_id, str) or not device_id:
            raise BadRequest("device_id must be a non-empty string")
        if not isinstance(series, str) or not series:
            raise BadRequest("series must be a non-empty string")
        topic = self.cfg.topic_for_series(series)
        ts_ms = obj.get("timestamp_ms", int(self.loop.now_ms()))
        if not isinstance(ts_ms, int):
            raise BadRequest("timestamp_ms must be an integer")
        value = obj.get("value")
        if not isinstance(value, (int, float)) or isinstance(value, bool) \
                or not math.isfinite(value):
            raise BadRequest("value must be a finite number")
        device = pseudonymize(self.cfg.secret, device_id)
        measurement = {"device_pseudonym": device, "series": series,
                       "timestamp_ms": ts_ms, "value": float(value)}
        self._add_location(obj, measurement)
        self._add_attributes(obj, measurement)
        entry = (device.encode("ascii"), canonical_json(measurement), ts_ms)

        def done(err, offsets):
            if err is not None:
                respond(_STATUS_BY_CODE.get(err.code, 503), err.to_dict())
                return
            self.counters["measurements_accepted"] += 1
            p, o = offsets[0]
            respond(202, {"topic": topic, "partition": p, "offset": o,
                          "device_pseudonym": device})
        self.client.produce(topic, -1, [entry], done,
                            attempts=self.cfg.produce_attempts)

    @staticmethod
    def _add_location(obj: dict, measurement: dict):
        lat, lon = obj.get("lat"), obj.get("lon")
        if lat is None and lon is None:
            return
        if lat is None or lon is None:
            raise BadRequest("lat and lon must be given together")
        for name, v, bound in (("lat", lat, 90.0), ("lon", lon, 180.0)):
            if not isinstance(v, (int, float)) or isinstance(v, bool) \
                    or not math.isfinite(v) or abs(v) > bound:
                raise BadRequest(f"{name} must be a number in [-{bound}, {bound}]")
        measurement["lat"] = float(lat)
        measurement["lon"] = float(lon)

    @staticmethod
    def _add_attributes(obj: dict, measurement: dict):
        attrs = obj.get("attributes")
        if attrs is None:
            return
        if not isinstance(attrs, dict) or not all(
                isinstance(k, str) and isinstance(v, str)
                for k, v in attrs.items()):
            raise BadRequest("attributes must map strings to strings")
        measurement["attributes"] = attrs

    # -- consuming ---------------------------------------------------------

    def _get_messages(self, topic: str, partition_s: str, query: dict, respond):
        if "offset" not in query:
            raise BadRequest("offset query parameter is required")
        try:
            partition = int(partition_s)
            offset = int(query["offset"])
            max_records = min(int(query.get("max_records", DEFAULT_PAGE)),
                              MAX_PAGE)
            wait_ms = min(int(query.get("wait_ms", "0")), MAX_WAIT_MS)
        except ValueError:
            raise BadRequest("paging parameters must be integers") from None
        if partition < 0 or offset < 0 or max_records < 1 or wait_ms < 0:
            raise BadRequest("negative paging parameters")

        def done(err, res):
            if err is not None:
                respond(_STATUS_BY_CODE.get(err.code, 503), err.to_dict())
                return
            records = []
            for r in res.records:
                out = {"offset": r.offset, "timestamp_ms": r.timestamp_ms,
                       "value": b64encode(r.value).decode("ascii")}
                if r.key is not None:
                    out["key"] = b64encode(r.key).decode("ascii")
                records.append(out)
            self.counters["fetched_records"] += len(records)
            respond(200, {"records": records,
                          "high_watermark": res.high_watermark,
                          "earliest_offset": res.earliest})
        self.client.fetch(topic, partition, offset, done,
                          max_records=max_records, wait_ms=wait_ms)

    # -- admin and stats ---------------------------------------------------

    def _post_topic(self, topic: str, body: bytes, respond):
        obj = self._json_body(body) if body else {}

        def done(err, meta):
            if err is not None:
                respond(_STATUS_BY_CODE.get(err.code, 503), err.to_dict())
                return
            respond(201, meta)
        self.client.create_topic(
            topic, int(obj.get("partitions", 1)),
            int(obj.get("replication_factor", 1)),
            int(obj.get("retention_ms", 86_400_000)), done)

    def _get_stats(self, query: dict, respond):
        op = {"op": "stats"}
        if "topic" in query:
            op["topic"] = query["topic"]
        if "since_ms" in query:
            try:
                op["since_ms"] = int(query["since_ms"])
            except ValueError:
                raise BadRequest("since_ms must be an integer") from None

        def with_meta(err, meta):
            if err is not None:
                # partial data is success; report what we know
                respond(200, {"gateway": dict(self.counters), "brokers": {},
                              "detail": "cluster metadata unavailable"})
                return
            brokers = meta.get("brokers", {})
            out = {}
            remaining = [len(brokers)]
            if not brokers:
                respond(200, {"gateway": dict(self.counters), "brokers": {}})
                return

            def one_done(bid):
                def cb(err, snap):
                    out[bid] = {"unreachable": True} if err is not None else snap
                    remaining[0] -= 1
                    if remaining[0] == 0:
                        respond(200, {"gateway": dict(self.counters),
                                      "brokers": out})
                return cb
            for bid, addr in brokers.items():
                self.client.json_op(dict(op), one_done(bid), addr=addr)
        self.client.metadata(with_meta)


class SimGateway:
    """Frame-level shell: accepts MSG_HTTP frames carrying a JSON request
    {method, path, query, body} and answers {status, body} on the ack."""

    def __init__(self, core: GatewayCore, network, listen: str):
        self.core = core
        self.listener = network.listen(listen, self._on_accept)

    def _on_accept(self, channel):
        channel.set_handler(self._on_frame, None)

    def _on_frame(self, channel, msg_type, corr_id, payload):
        if msg_type != wire.MSG_HTTP:
            channel.send(wire.MSG_ACK, corr_id,
                         wire.encode_error(BadRequest("expected an HTTP frame")))
            return
        try:
            req = wire.decode_json(payload)
            method = req["method"]
            path = req["path"]
            query = {str(k): str(v) for k, v in req.get("query", {}).items()}
            body = req.get("body")
            raw = json.dumps(body).encode() if body is not None else b""
        except (EdgebusError, KeyError, TypeError) as e:
            channel.send(wire.MSG_ACK, corr_id,
                         wire.encode_error(BadRequest(f"bad HTTP frame: {e}")))
            return

        def respond(status: int, obj: dict):
            try:
                channel.send(wire.MSG_ACK, corr_id,
                             wire.encode_json_ok({"status": status, "body": obj}))
            except (OSError, ValueError):
                pass
        self.core.handle(method, path, query, raw, respond)

    def close(self):
        self.listener.close()


def sim_http_request(method: str, path: str, query: dict | None = None,
                     body=None) -> bytes:
    """Encode one simulated HTTP request frame payload."""
    return wire.encode_json({"method": method, "path": path,
                             "query": query or {}, "body": body})


class HttpGateway:
    """Real HTTP shell on a threading server.  Handler threads never touch
    core state: they post the request to the loop and wait for the answer."""

    def __init__(self, core: GatewayCore, listen: str):
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        host, _, port = listen.rpartition(":")
        gateway = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):  # no access log: bodies may be sensitive
                pass

            def _run(self, method):
                split = urlsplit(self.path)
                query = dict(parse_qsl(split.query))
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                done = threading.Event()
                box = [500, {"error": "internal", "detail": "no response"}]

                def respond(status, obj):
                    box[0], box[1] = status, obj
                    done.set()
                gateway.core.loop.post(lambda: gateway.core.handle(
                    method, split.path, query, body, respond))
                done.wait(60.0)
                data = json.dumps(box[1]).encode("utf-8")
                self.send_response(box[0])
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._run("GET")

            def do_POST(self):
                self._run("POST")

        self.core = core
        self.server = ThreadingHTTPServer((host or "127.0.0.1", int(port)), Handler)
        self.port = self.server.server_address[1]
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        name="gateway-http", daemon=True)
        self._thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5.0)
