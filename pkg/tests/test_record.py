import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgebus import record
from edgebus.errors import CorruptRecord

from .reference_impls import crc32_bitwise


def test_crc_check_value():
    # standard check value for CRC-32/ISO-HDLC
    assert record.crc32(b"123456789") == 0xCBF43926
    assert crc32_bitwise(b"123456789") == 0xCBF43926


@given(st.binary(max_size=200))
def test_crc_matches_bitwise_oracle(data):
    assert record.crc32(data) == crc32_bitwise(data)


def test_frame_layout_golden():
    # hand-assembled frame for ts=1000, key=b"k", value=b"vv"
    body = b"\x00" + struct.pack(">q", 1000) + struct.pack(">i", 1) + b"k"
    body += struct.pack(">I", 2) + b"vv"
    expected = struct.pack(">I", 4 + len(body)) + struct.pack(">I", crc32_bitwise(body)) + body
    assert record.encode_entry(1000, b"k", b"vv") == expected


def test_absent_key_sentinel():
    frame = record.encode_entry(0, None, b"x")
    # key_len lives right after length+crc+attrs+timestamp
    (key_len,) = struct.unpack_from(">i", frame, 4 + 4 + 1 + 8)
    assert key_len == -1
    rec, _ = record.decode_record(frame, 0, 7)
    assert rec.key is None and rec.value == b"x" and rec.offset == 7


def test_empty_key_is_distinct_from_absent():
    frame = record.encode_entry(0, b"", b"x")
    rec, _ = record.decode_record(frame, 0, 0)
    assert rec.key == b""


def test_value_never_absent():
    with pytest.raises(ValueError):
        record.encode_entry(0, b"k", None)


@given(
    st.one_of(st.none(), st.binary(max_size=64)),
    st.binary(max_size=512),
    st.integers(min_value=-(2**62), max_value=2**62),
)
def test_round_trip(key, value, ts):
    frame = record.encode_entry(ts, key, value)
    assert len(frame) == record.frame_size(ts, key, value)
    rec, end = record.decode_record(frame, 0, 42)
    assert end == len(frame)
    assert (rec.key, rec.value, rec.timestamp_ms) == (key, value, ts)


@given(st.binary(min_size=1, max_size=300), st.data())
def test_single_bit_flip_detected(value, data):
    frame = bytearray(record.encode_entry(123, b"key", value))
    bit = data.draw(st.integers(min_value=0, max_value=len(frame) * 8 - 1))
    frame[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(CorruptRecord):
        record.decode_record(bytes(frame), 0, 0)


def test_truncated_frame_rejected():
    frame = record.encode_entry(5, None, b"hello")
    for cut in range(len(frame)):
        with pytest.raises(CorruptRecord):
            record.decode_record(frame[:cut], 0, 0)


def test_decode_all_assigns_consecutive_offsets():
    blob = b"".join(record.encode_entry(i, None, bytes([i])) for i in range(5))
    recs = record.decode_all(blob, 100)
    assert [r.offset for r in recs] == [100, 101, 102, 103, 104]
