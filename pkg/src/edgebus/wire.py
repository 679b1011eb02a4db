"""Binary framing and payload codecs for the broker protocol.

Every message, request or response, travels as one frame:

    total_len: u32 | msg_type: u8 | correlation_id: u32 | payload

total_len counts everything after itself (so 5 + len(payload)).  All
integers are big-endian.  Message types:

    1 = produce
    2 = fetch
    3 = heartbeat
    4 = metadata
    5 = failover_decree
    6 = ack/err (every response)

Responses carry a status byte first: 0 = ok followed by an op-specific
body, anything else = error followed by a JSON error object (see
errors.to_dict).  Data-path payloads (produce/fetch) are binary; control
payloads (heartbeat/metadata/decree) are UTF-8 JSON.

Produce entries and fetch results reuse the on-disk record framing
byte-for-byte, so replicas and clients ship exactly the bytes the log
stores.
"""

from __future__ import annotations

import json
import struct

from .errors import EdgebusError, from_dict as error_from_dict

MSG_PRODUCE = 1
MSG_FETCH = 2
MSG_HEARTBEAT = 3
MSG_METADATA = 4
MSG_DECREE = 5
MSG_ACK = 6
# message-level HTTP for simulated topologies: the gateway core sees the
# same (method, path, query, body) tuples it gets from a real HTTP server
MSG_HTTP = 7

FRAME_HEADER = struct.Struct(">IBI")  # total_len, msg_type, correlation_id
HEADER_LEN = FRAME_HEADER.size  # 9
# One fetch response can carry several MiB of records; cap frames well
# above that but low enough that a garbage length prefix cannot balloon.
MAX_FRAME_PAYLOAD = 16 * 1024 * 1024

STATUS_OK = 0
STATUS_ERR = 1

ACK_LEADER_ONLY = 0
ACK_ALL_ISR = 1


class ProtocolError(Exception):
    """Malformed frame; the connection carrying it must be dropped."""


def encode_frame(msg_type: int, correlation_id: int, payload: bytes) -> bytes:
    return FRAME_HEADER.pack(5 + len(payload), msg_type, correlation_id) + payload


class FrameParser:
    """Incremental decoder: feed raw bytes, get complete frames out."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, int, bytes]]:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < HEADER_LEN:
                break
            total_len, msg_type, corr_id = FRAME_HEADER.unpack_from(self._buf, 0)
            if total_len < 5 or total_len - 5 > MAX_FRAME_PAYLOAD:
                raise ProtocolError(f"frame length {total_len} out of bounds")
            if msg_type < MSG_PRODUCE or msg_type > MSG_HTTP:
                raise ProtocolError(f"unknown message type {msg_type}")
            end = 4 + total_len
            if len(self._buf) < end:
                break
            payload = bytes(self._buf[HEADER_LEN:end])
            del self._buf[:end]
            out.append((msg_type, corr_id, payload))
        return out


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string field too long")
    return struct.pack(">H", len(raw)) + raw


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(buf):
        raise ProtocolError("truncated string field")
    (n,) = struct.unpack_from(">H", buf, pos)
    pos += 2
    if pos + n > len(buf):
        raise ProtocolError("truncated string field")
    return buf[pos : pos + n].decode("utf-8"), pos + n


# ---- produce ----------------------------------------------------------
# request: ack_mode u8 | topic str16 | partition i32 (-1 = route by key)
#          | count u32 | count record frames (on-disk framing)

def encode_produce(topic: str, partition: int, ack_mode: int, count: int,
                   frames: bytes) -> bytes:
    head = struct.pack(">B", ack_mode) + _pack_str(topic)
    head += struct.pack(">iI", partition, count)
    return head + frames


def decode_produce(payload: bytes) -> tuple[str, int, int, int, bytes]:
    """Returns (topic, partition, ack_mode, count, frames)."""
    try:
        (ack_mode,) = struct.unpack_from(">B", payload, 0)
        topic, pos = _unpack_str(payload, 1)
        partition, count = struct.unpack_from(">iI", payload, pos)
    except struct.error as e:
        raise ProtocolError(f"bad produce payload: {e}") from None
    return topic, partition, ack_mode, count, payload[pos + 8 :]


# response body (after status byte):
#   committed u8 | count u32 | count * (partition u32 | offset u64)

def encode_produce_ok(committed: bool, offsets: list[tuple[int, int]]) -> bytes:
    out = [struct.pack(">BBI", STATUS_OK, 1 if committed else 0, len(offsets))]
    for partition, offset in offsets:
        out.append(struct.pack(">IQ", partition, offset))
    return b"".join(out)


def decode_produce_ok(body: bytes) -> tuple[bool, list[tuple[int, int]]]:
    committed, count = struct.unpack_from(">BI", body, 0)
    pos = 5
    offsets = []
    for _ in range(count):
        partition, offset = struct.unpack_from(">IQ", body, pos)
        offsets.append((partition, offset))
        pos += 12
    return bool(committed), offsets


# ---- fetch ------------------------------------------------------------
# request: flags u8 (bit0 = follower) | topic str16 | partition u32
#          | from_offset u64 | max_bytes u32 | max_records u32 (0 = no cap)
#          | wait_ms u32 | epoch u32 | follower_id u32

FETCH_FLAG_FOLLOWER = 0x01

def encode_fetch(topic: str, partition: int, from_offset: int, max_bytes: int,
                 max_records: int = 0, wait_ms: int = 0,
                 follower_id: int | None = None, epoch: int = 0) -> bytes:
    flags = FETCH_FLAG_FOLLOWER if follower_id is not None else 0
    return (struct.pack(">B", flags) + _pack_str(topic)
            + struct.pack(">IQIIIII", partition, from_offset, max_bytes,
                          max_records, wait_ms, epoch,
                          follower_id if follower_id is not None else 0))


def decode_fetch(payload: bytes) -> dict:
    try:
        (flags,) = struct.unpack_from(">B", payload, 0)
        topic, pos = _unpack_str(payload, 1)
        (partition, from_offset, max_bytes, max_records, wait_ms, epoch,
         follower_id) = struct.unpack_from(">IQIIIII", payload, pos)
    except struct.error as e:
        raise ProtocolError(f"bad fetch payload: {e}") from None
    return {
        "topic": topic,
        "partition": partition,
        "from_offset": from_offset,
        "max_bytes": max_bytes,
        "max_records": max_records,
        "wait_ms": wait_ms,
        "epoch": epoch,
        "follower_id": follower_id if flags & FETCH_FLAG_FOLLOWER else None,
    }


# response body (after status byte):
#   high_watermark u64 | earliest u64 | log_end u64 | count u32 | frames

def encode_fetch_ok(high_watermark: int, earliest: int, log_end: int,
                    count: int, frames: bytes) -> bytes:
    return (struct.pack(">BQQQI", STATUS_OK, high_watermark, earliest,
                        log_end, count) + frames)


def decode_fetch_ok(body: bytes) -> tuple[int, int, int, int, bytes]:
    hw, earliest, log_end, count = struct.unpack_from(">QQQI", body, 0)
    return hw, earliest, log_end, count, body[28:]


# ---- JSON control payloads -------------------------------------------

def encode_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_json(payload: bytes):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"bad json payload: {e}") from None


def encode_json_ok(obj) -> bytes:
    return bytes([STATUS_OK]) + encode_json(obj)


def encode_error(err: EdgebusError) -> bytes:
    return bytes([STATUS_ERR]) + encode_json(err.to_dict())


def split_response(payload: bytes) -> bytes:
    """Returns the ok-body of a response, or raises the carried error."""
    if not payload:
        raise ProtocolError("empty response payload")
    if payload[0] == STATUS_OK:
        return payload[1:]
    raise error_from_dict(decode_json(payload[1:]))
