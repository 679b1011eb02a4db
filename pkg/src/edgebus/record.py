"""Record codec: the byte framing used both on disk and inside wire messages.

Frame layout, big-endian, bit-exact:

    ┌────────────┬──────────┬───────────┬────────────────┬─────────────┬─────┬──────────────┬───────┐
    │ length u32 │ crc u32  │ attrs u8  │ timestamp i64  │ key_len i32 │ key │ value_len u32│ value │
    └────────────┴──────────┴───────────┴────────────────┴─────────────┴─────┴──────────────┴───────┘

``length`` counts every byte after itself (crc included).  ``crc`` is CRC-32
(IEEE polynomial 0xEDB88320, reflected) over every byte after itself.
``key_len`` of -1 means the key is absent; 0 means an empty key.  ``attrs``
must currently be 0.

Offsets are positional and never stored in the frame: a record's offset is the
segment's base offset plus its index within the file, so replicas can ship and
append the exact on-disk bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import CorruptRecord

LENGTH_PREFIX = 4
HEADER_AFTER_LENGTH = 4 + 1 + 8 + 4  # crc + attrs + timestamp + key_len
# length + crc + attrs + timestamp + key_len + value_len, with empty key/value
MIN_FRAME_SIZE = LENGTH_PREFIX + HEADER_AFTER_LENGTH + 4

_HEAD = struct.Struct(">IIBq")  # length, crc, attrs, timestamp_ms
_I32 = struct.Struct(">i")
_U32 = struct.Struct(">I")


@dataclass(frozen=True)
class Record:
    offset: int
    timestamp_ms: int
    key: bytes | None
    value: bytes
    crc: int


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def encode_entry(timestamp_ms: int, key: bytes | None, value: bytes) -> bytes:
    """Serialize one (timestamp, key, value) entry into a framed record."""
    if value is None:
        raise ValueError("record value may be empty but never absent")
    key_len = -1 if key is None else len(key)
    body = bytearray()
    body.append(0)  # attrs
    body += struct.pack(">q", timestamp_ms)
    body += _I32.pack(key_len)
    if key:
        body += key
    body += _U32.pack(len(value))
    body += value
    crc = crc32(bytes(body))
    return _U32.pack(4 + len(body)) + _U32.pack(crc) + bytes(body)


def frame_size(timestamp_ms: int, key: bytes | None, value: bytes) -> int:
    """Framed size of an entry without serializing it."""
    return MIN_FRAME_SIZE + (len(key) if key else 0) + len(value)


def decode_record(buf: bytes, pos: int, offset: int, verify_crc: bool = True) -> tuple[Record, int]:
    """Decode one framed record at ``pos``; returns (record, next position).

    Raises CorruptRecord on bad framing or a CRC mismatch.  An incomplete tail
    (fewer bytes than the frame declares) is also CorruptRecord; recovery
    distinguishes it by position, not by error type.
    """
    end = len(buf)
    if pos + LENGTH_PREFIX > end:
        raise CorruptRecord(f"truncated length prefix at {pos}")
    (length,) = _U32.unpack_from(buf, pos)
    if length < HEADER_AFTER_LENGTH + 4:
        raise CorruptRecord(f"frame length {length} below minimum at {pos}")
    frame_end = pos + LENGTH_PREFIX + length
    if frame_end > end:
        raise CorruptRecord(f"truncated frame at {pos}: need {length} bytes")
    (length, crc, attrs, timestamp_ms) = _HEAD.unpack_from(buf, pos)
    if attrs != 0:
        raise CorruptRecord(f"unsupported attributes byte {attrs} at {pos}")
    body_start = pos + LENGTH_PREFIX + 4
    if verify_crc and crc32(buf[body_start:frame_end]) != crc:
        raise CorruptRecord(f"crc mismatch at {pos}", offset=offset)
    p = pos + _HEAD.size
    (key_len,) = _I32.unpack_from(buf, p)
    p += 4
    if key_len < -1:
        raise CorruptRecord(f"bad key length {key_len} at {pos}")
    if key_len == -1:
        key = None
    else:
        if p + key_len > frame_end:
            raise CorruptRecord(f"key overruns frame at {pos}")
        key = bytes(buf[p : p + key_len])
        p += key_len
    (value_len,) = _U32.unpack_from(buf, p)
    p += 4
    if p + value_len != frame_end:
        raise CorruptRecord(f"value length {value_len} disagrees with frame at {pos}")
    value = bytes(buf[p:frame_end])
    return Record(offset, timestamp_ms, key, value, crc), frame_end


def decode_all(buf: bytes, first_offset: int) -> list[Record]:
    """Decode a run of contiguous framed records starting at offset ``first_offset``."""
    out = []
    pos = 0
    off = first_offset
    while pos < len(buf):
        rec, pos = decode_record(buf, pos, off)
        out.append(rec)
        off += 1
    return out


def scan_frames(buf: bytes, base_offset: int):
    """Yield (offset, position, frame_length) without CRC checks.

    Stops cleanly at the first incomplete or malformed frame; used when only
    the frame boundaries matter (timestamp scans, sealed-segment audits).
    """
    pos = 0
    off = base_offset
    end = len(buf)
    while pos + LENGTH_PREFIX <= end:
        (length,) = _U32.unpack_from(buf, pos)
        if length < HEADER_AFTER_LENGTH + 4 or pos + LENGTH_PREFIX + length > end:
            return
        yield off, pos, LENGTH_PREFIX + length
        pos += LENGTH_PREFIX + length
        off += 1


def validate_frames(buf: bytes, count: int) -> int:
    """Check that buf holds exactly ``count`` CRC-clean frames.

    Cheap gate at the produce boundary: verifies framing and checksums
    without materializing keys or values.  Returns the largest frame size
    seen.  Raises CorruptRecord on any framing or CRC defect.
    """
    view = memoryview(buf)
    pos = 0
    end = len(buf)
    largest = 0
    for i in range(count):
        if pos + LENGTH_PREFIX + 4 > end:
            raise CorruptRecord(f"frame {i}: truncated")
        (length,) = _U32.unpack_from(buf, pos)
        if length < HEADER_AFTER_LENGTH + 4 or pos + LENGTH_PREFIX + length > end:
            raise CorruptRecord(f"frame {i}: bad length {length}")
        (stored,) = _U32.unpack_from(buf, pos + LENGTH_PREFIX)
        body = view[pos + LENGTH_PREFIX + 4 : pos + LENGTH_PREFIX + length]
        if zlib.crc32(body) & 0xFFFFFFFF != stored:
            raise CorruptRecord(f"frame {i}: crc mismatch")
        largest = max(largest, LENGTH_PREFIX + length)
        pos += LENGTH_PREFIX + length
    if pos != end:
        raise CorruptRecord("trailing bytes after last frame")
    return largest
