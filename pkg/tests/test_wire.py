"""Wire framing and payload codec tests, golden bytes first."""

import struct

import pytest
from hypothesis import given, strategies as st

from edgebus import record, wire
from edgebus.errors import NotLeader, OffsetOutOfRange


def test_frame_golden_bytes():
    # total_len 8 = msg_type(1) + corr_id(4) + payload(3)
    frame = wire.encode_frame(wire.MSG_PRODUCE, 7, b"xyz")
    assert frame == b"\x00\x00\x00\x08\x01\x00\x00\x00\x07xyz"


def test_frame_empty_payload():
    frame = wire.encode_frame(wire.MSG_HEARTBEAT, 0, b"")
    assert frame == b"\x00\x00\x00\x05\x03\x00\x00\x00\x00"
    parser = wire.FrameParser()
    assert parser.feed(frame) == [(wire.MSG_HEARTBEAT, 0, b"")]


def test_parser_reassembles_byte_at_a_time():
    frames = (wire.encode_frame(1, 1, b"a" * 100)
              + wire.encode_frame(2, 2, b"")
              + wire.encode_frame(6, 3, b"bb"))
    parser = wire.FrameParser()
    got = []
    for i in range(len(frames)):
        got.extend(parser.feed(frames[i : i + 1]))
    assert [(t, c, len(p)) for t, c, p in got] == [(1, 1, 100), (2, 2, 0), (6, 3, 2)]


def test_parser_rejects_bad_length():
    parser = wire.FrameParser()
    with pytest.raises(wire.ProtocolError):
        parser.feed(struct.pack(">IBI", 2, 1, 0))  # total_len < 5
    parser = wire.FrameParser()
    with pytest.raises(wire.ProtocolError):
        parser.feed(struct.pack(">IBI", wire.MAX_FRAME_PAYLOAD + 6, 1, 0))


def test_parser_rejects_unknown_type():
    parser = wire.FrameParser()
    with pytest.raises(wire.ProtocolError):
        parser.feed(wire.encode_frame(9, 0, b""))


@given(st.lists(st.tuples(st.integers(1, 6), st.integers(0, 2**32 - 1),
                          st.binary(max_size=200)), max_size=10),
       st.integers(1, 64))
def test_parser_roundtrip_any_chunking(messages, chunk):
    blob = b"".join(wire.encode_frame(t, c, p) for t, c, p in messages)
    parser = wire.FrameParser()
    got = []
    for i in range(0, len(blob), chunk):
        got.extend(parser.feed(blob[i : i + chunk]))
    assert got == messages


def test_produce_payload_roundtrip():
    frames = record.encode_entry(5, b"k", b"v") + record.encode_entry(6, None, b"")
    payload = wire.encode_produce("sensors.noise", -1, wire.ACK_ALL_ISR, 2, frames)
    topic, partition, ack, count, got = wire.decode_produce(payload)
    assert (topic, partition, ack, count) == ("sensors.noise", -1, 1, 2)
    assert got == frames


def test_produce_payload_golden_header():
    payload = wire.encode_produce("t", 3, wire.ACK_LEADER_ONLY, 0, b"")
    assert payload == b"\x00" + b"\x00\x01t" + b"\x00\x00\x00\x03" + b"\x00\x00\x00\x00"


def test_produce_ok_roundtrip():
    body = wire.encode_produce_ok(True, [(0, 7), (3, 2**40)])
    assert body[0] == wire.STATUS_OK
    committed, offsets = wire.decode_produce_ok(body[1:])
    assert committed and offsets == [(0, 7), (3, 2**40)]


def test_fetch_payload_roundtrip():
    payload = wire.encode_fetch("t", 2, 10, 65536, max_records=5, wait_ms=100,
                                follower_id=1, epoch=4)
    req = wire.decode_fetch(payload)
    assert req == {"topic": "t", "partition": 2, "from_offset": 10,
                   "max_bytes": 65536, "max_records": 5, "wait_ms": 100,
                   "epoch": 4, "follower_id": 1}


def test_fetch_consumer_has_no_follower_id():
    req = wire.decode_fetch(wire.encode_fetch("t", 0, 0, 1024))
    assert req["follower_id"] is None and req["epoch"] == 0


def test_fetch_ok_roundtrip():
    frames = record.encode_entry(1, None, b"abc")
    body = wire.encode_fetch_ok(10, 2, 12, 1, frames)
    hw, earliest, log_end, count, got = wire.decode_fetch_ok(body[1:])
    assert (hw, earliest, log_end, count) == (10, 2, 12, 1)
    assert got == frames


def test_error_response_rebuilds_typed_error():
    payload = wire.encode_error(NotLeader("not leader", leader=2, epoch=5))
    assert payload[0] == wire.STATUS_ERR
    with pytest.raises(NotLeader) as ei:
        wire.split_response(payload)
    assert ei.value.extra["leader"] == 2 and ei.value.extra["epoch"] == 5

    payload = wire.encode_error(OffsetOutOfRange("gone", earliest_offset=100))
    with pytest.raises(OffsetOutOfRange) as ei:
        wire.split_response(payload)
    assert ei.value.extra["earliest_offset"] == 100


def test_split_response_ok_passthrough():
    assert wire.split_response(b"\x00rest") == b"rest"
    with pytest.raises(wire.ProtocolError):
        wire.split_response(b"")


def test_json_payload_roundtrip():
    obj = {"op": "stats", "topics": ["a", "b"], "n": 3}
    assert wire.decode_json(wire.encode_json(obj)) == obj
    with pytest.raises(wire.ProtocolError):
        wire.decode_json(b"\xff\xfe")
