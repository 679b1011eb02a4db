"""Segmented, retention-bounded, append-only partition log.

One ``PartitionLog`` owns a directory of segment pairs:

    00000000000000000000.log     framed records (see edgebus.record)
    00000000000000000000.index   sparse (relative_offset u32, file_position u32)
                                 pairs, big-endian, one appended per
                                 ``index_interval_bytes`` of log data

The 20-digit file stem is the base offset of the segment's first record.
Offsets are dense: the readable range is exactly [earliest_offset,
next_offset).  The last segment is active (appended to); older segments are
sealed and immutable.  Retention deletes whole sealed segments from the front
once every record in them is older than the retention window.

Writer model: one writer at a time (the owning broker serializes appends);
readers may run concurrently with appends and retention.  Readers work from a
metadata snapshot taken under the log lock and open their own file handles, so
a segment unlinked mid-read stays readable through the already-open descriptor
(POSIX semantics); a reader that loses the race before opening retries and
surfaces OffsetOutOfRange.
"""

from __future__ import annotations

import errno
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

from . import record as rec
from .errors import CorruptRecord, LogClosed, OffsetOutOfRange, StorageFull, UnrecoverableLog

logger = logging.getLogger(__name__)

_INDEX_ENTRY = struct.Struct(">II")

LOG_SUFFIX = ".log"
INDEX_SUFFIX = ".index"


@dataclass
class LogConfig:
    retention_ms: int = 86_400_000
    segment_max_bytes: int = 16 * 1024 * 1024
    index_interval_bytes: int = 4096

    def validate(self) -> "LogConfig":
        if self.retention_ms < 1000:
            raise ValueError("retention_ms must be >= 1000")
        if self.segment_max_bytes < 4096:
            raise ValueError("segment_max_bytes must be >= 4096")
        if self.index_interval_bytes < 128:
            raise ValueError("index_interval_bytes must be >= 128")
        return self


def segment_name(base_offset: int) -> str:
    return f"{base_offset:020d}"


@dataclass
class _Segment:
    base_offset: int
    path: Path  # stem path without suffix
    record_count: int = 0
    size_bytes: int = 0
    max_timestamp_ms: int = -(2**63)
    sealed: bool = False
    index: list[tuple[int, int]] = field(default_factory=list)
    bytes_since_index: int = 0
    log_f: object = None  # append handle, active segment only
    index_f: object = None

    @property
    def log_path(self) -> Path:
        return self.path.with_suffix(LOG_SUFFIX)

    @property
    def index_path(self) -> Path:
        return self.path.with_suffix(INDEX_SUFFIX)

    @property
    def end_offset(self) -> int:
        return self.base_offset + self.record_count

    def index_floor(self, offset: int) -> tuple[int, int]:
        """(relative_offset, file_position) of the nearest indexed record at
        or before ``offset``; (0, 0) when nothing qualifies."""
        rel = offset - self.base_offset
        best = (0, 0)
        for r, p in self.index:
            if r <= rel:
                best = (r, p)
            else:
                break
        return best


class _Cursor:
    """Forward frame reader over one segment's byte range [pos, limit)."""

    def __init__(self, path: Path, pos: int, limit: int, chunk: int = 1 << 16):
        self._f = open(path, "rb")
        self._f.seek(pos)
        self.pos = pos
        self.limit = limit
        self.chunk = chunk
        self.buf = bytearray()
        self.buf_start = pos

    def close(self):
        self._f.close()

    def _fill(self, need: int) -> bool:
        while len(self.buf) - (self.pos - self.buf_start) < need:
            want = min(self.chunk, self.limit - self.buf_start - len(self.buf))
            if want <= 0:
                return False
            data = self._f.read(want)
            if not data:
                return False
            self.buf += data
        return True

    def next_frame(self) -> bytes | None:
        """Return the next whole frame's bytes, or None at the range end.

        Raises CorruptRecord if the range ends mid-frame.
        """
        if self.pos >= self.limit:
            return None
        if not self._fill(rec.LENGTH_PREFIX):
            raise CorruptRecord(f"segment range ends inside a length prefix at {self.pos}")
        start = self.pos - self.buf_start
        (length,) = struct.unpack_from(">I", self.buf, start)
        total = rec.LENGTH_PREFIX + length
        if self.pos + total > self.limit or not self._fill(total):
            raise CorruptRecord(f"segment range ends inside a frame at {self.pos}")
        frame = bytes(self.buf[start : start + total])
        self.pos += total
        # drop consumed bytes occasionally to bound memory
        if start + total > self.chunk * 4:
            del self.buf[: start + total]
            self.buf_start = self.pos
        return frame


class PartitionLog:
    """Durable per-partition append-only log of framed records."""

    def __init__(self, directory: str | Path, config: LogConfig | None = None):
        self.dir = Path(directory)
        self.config = (config or LogConfig()).validate()
        self.dir.mkdir(parents=True, exist_ok=True)
        self._segments: list[_Segment] = []
        self._closed = False
        import threading

        self._lock = threading.Lock()
        self.recover()

    # -- lifecycle ---------------------------------------------------------

    def recover(self) -> int:
        """Scan segments, repair the active tail, and return next_offset.

        Sealed segments get a structural frame scan (no CRC) to learn record
        counts and max timestamps; adjacent base offsets must agree with the
        counts or the log is declared unrecoverable.  The last segment is
        scanned record by record with CRC checks and truncated at the first
        corrupt or partial record; its index is rebuilt.
        """
        with self._lock:
            for seg in self._segments:
                self._close_segment(seg)
            self._segments = []
            stems = sorted(
                p.stem for p in self.dir.glob(f"*{LOG_SUFFIX}") if p.stem.isdigit()
            )
            if not stems:
                self._segments = [self._new_segment(0)]
                return 0
            bases = [int(s) for s in stems]
            if bases != sorted(set(bases)):
                raise UnrecoverableLog(f"duplicate segment bases in {self.dir}")
            for i, base in enumerate(bases):
                seg = _Segment(base, self.dir / segment_name(base))
                last = i == len(bases) - 1
                if last:
                    self._recover_active(seg)
                else:
                    self._audit_sealed(seg, next_base=bases[i + 1])
                self._segments.append(seg)
            active = self._segments[-1]
            active.log_f = open(active.log_path, "ab")
            active.index_f = open(active.index_path, "ab")
            return active.end_offset

    def _audit_sealed(self, seg: _Segment, next_base: int) -> None:
        data = seg.log_path.read_bytes()
        count = 0
        max_ts = seg.max_timestamp_ms
        scanned_index: list[tuple[int, int]] = []
        since = 0
        consumed = 0
        for off, pos, flen in rec.scan_frames(data, seg.base_offset):
            (ts,) = struct.unpack_from(">q", data, pos + 9)
            max_ts = max(max_ts, ts)
            if since >= self.config.index_interval_bytes:
                scanned_index.append((off - seg.base_offset, pos))
                since = 0
            since += flen
            count += 1
            consumed = pos + flen
        if consumed != len(data) or seg.base_offset + count != next_base:
            raise UnrecoverableLog(
                f"sealed segment {seg.log_path.name} holds {count} records "
                f"({consumed}/{len(data)} bytes) but next segment starts at {next_base}"
            )
        seg.record_count = count
        seg.size_bytes = len(data)
        seg.max_timestamp_ms = max_ts
        seg.sealed = True
        seg.index = self._load_index(seg) or scanned_index

    def _load_index(self, seg: _Segment) -> list[tuple[int, int]] | None:
        try:
            raw = seg.index_path.read_bytes()
        except FileNotFoundError:
            return None
        if len(raw) % _INDEX_ENTRY.size != 0:
            return None
        entries = [
            _INDEX_ENTRY.unpack_from(raw, i)
            for i in range(0, len(raw), _INDEX_ENTRY.size)
        ]
        for r, p in entries:
            if r >= seg.record_count or p >= seg.size_bytes:
                return None
        return entries

    def _recover_active(self, seg: _Segment) -> None:
        data = seg.log_path.read_bytes()
        pos = 0
        count = 0
        max_ts = seg.max_timestamp_ms
        index: list[tuple[int, int]] = []
        since = 0
        while pos < len(data):
            try:
                r, nxt = rec.decode_record(data, pos, seg.base_offset + count)
            except CorruptRecord as e:
                logger.warning(
                    "truncating %s at byte %d (offset %d): %s",
                    seg.log_path.name, pos, seg.base_offset + count, e,
                )
                with open(seg.log_path, "r+b") as f:
                    f.truncate(pos)
                    f.flush()
                    os.fsync(f.fileno())
                break
            if since >= self.config.index_interval_bytes:
                index.append((count, pos))
                since = 0
            since += nxt - pos
            max_ts = max(max_ts, r.timestamp_ms)
            count += 1
            pos = nxt
        seg.record_count = count
        seg.size_bytes = pos if pos <= len(data) else len(data)
        seg.max_timestamp_ms = max_ts
        seg.index = index
        seg.bytes_since_index = since
        with open(seg.index_path, "wb") as f:
            for entry in index:
                f.write(_INDEX_ENTRY.pack(*entry))
            f.flush()
            os.fsync(f.fileno())

    def _new_segment(self, base_offset: int) -> _Segment:
        seg = _Segment(base_offset, self.dir / segment_name(base_offset))
        seg.log_f = open(seg.log_path, "ab")
        seg.index_f = open(seg.index_path, "ab")
        return seg

    def _close_segment(self, seg: _Segment, sync: bool = False) -> None:
        for f in (seg.log_f, seg.index_f):
            if f is not None:
                try:
                    f.flush()
                    if sync:
                        os.fsync(f.fileno())
                finally:
                    f.close()
        seg.log_f = None
        seg.index_f = None

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._close_segment(self._segments[-1], sync=True)
            self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed

    # -- observable bounds ---------------------------------------------------

    @property
    def next_offset(self) -> int:
        with self._lock:
            return self._segments[-1].end_offset

    @property
    def earliest_offset(self) -> int:
        with self._lock:
            return self._segments[0].base_offset

    def size_bytes(self) -> int:
        with self._lock:
            return sum(s.size_bytes for s in self._segments)

    # -- append ---------------------------------------------------------------

    def append(self, entries: list[tuple[bytes | None, bytes, int]]) -> int:
        """Append (key, value, timestamp_ms) entries; returns the base offset.

        The batch is atomic: on an I/O failure everything written by this call
        is rolled back and StorageFull (ENOSPC) or the original OSError is
        raised with the log unchanged.
        """
        framed = [rec.encode_entry(ts, key, value) for key, value, ts in entries]
        timestamps = [ts for _, _, ts in entries]
        return self._append_frames(framed, timestamps)

    def append_encoded(self, frames_blob: bytes, count: int) -> int:
        """Append pre-framed records (a replica fetch payload) verbatim.

        Frames are CRC-verified before any byte lands in the segment files.
        """
        framed = []
        timestamps = []
        pos = 0
        for i in range(count):
            r, nxt = rec.decode_record(frames_blob, pos, 0)
            framed.append(frames_blob[pos:nxt])
            timestamps.append(r.timestamp_ms)
            pos = nxt
        if pos != len(frames_blob):
            raise CorruptRecord("replica payload has trailing bytes")
        return self._append_frames(framed, timestamps)

    def _append_frames(self, framed: list[bytes], timestamps: list[int]) -> int:
        with self._lock:
            if self._closed:
                raise LogClosed(str(self.dir))
            base = self._segments[-1].end_offset
            undo_active = self._segments[-1]
            undo_size = undo_active.size_bytes
            undo_count = undo_active.record_count
            undo_max_ts = undo_active.max_timestamp_ms
            undo_index_len = len(undo_active.index)
            undo_since = undo_active.bytes_since_index
            undo_nsegs = len(self._segments)
            try:
                for frame, ts in zip(framed, timestamps):
                    active = self._segments[-1]
                    if (
                        active.record_count > 0
                        and active.size_bytes + len(frame) > self.config.segment_max_bytes
                    ):
                        self._roll()
                        active = self._segments[-1]
                    if active.bytes_since_index >= self.config.index_interval_bytes:
                        entry = (active.record_count, active.size_bytes)
                        active.index_f.write(_INDEX_ENTRY.pack(*entry))
                        active.index.append(entry)
                        active.bytes_since_index = 0
                    active.log_f.write(frame)
                    active.size_bytes += len(frame)
                    active.bytes_since_index += len(frame)
                    active.record_count += 1
                    active.max_timestamp_ms = max(active.max_timestamp_ms, ts)
                self._segments[-1].log_f.flush()
                self._segments[-1].index_f.flush()
            except OSError as e:
                self._rollback(
                    undo_nsegs, undo_active, undo_size, undo_count,
                    undo_max_ts, undo_index_len, undo_since,
                )
                if e.errno == errno.ENOSPC:
                    raise StorageFull(f"append of {len(framed)} entries rejected") from e
                raise
            return base

    def _rollback(self, nsegs, active, size, count, max_ts, index_len, since) -> None:
        for seg in self._segments[nsegs:]:
            self._close_segment(seg)
            seg.log_path.unlink(missing_ok=True)
            seg.index_path.unlink(missing_ok=True)
        del self._segments[nsegs:]
        self._close_segment(active)
        with open(active.log_path, "r+b") as f:
            f.truncate(size)
        with open(active.index_path, "r+b") as f:
            f.truncate(index_len * _INDEX_ENTRY.size)
        active.size_bytes = size
        active.record_count = count
        active.max_timestamp_ms = max_ts
        del active.index[index_len:]
        active.bytes_since_index = since
        active.sealed = False
        active.log_f = open(active.log_path, "ab")
        active.index_f = open(active.index_path, "ab")

    def _roll(self) -> None:
        active = self._segments[-1]
        self._close_segment(active, sync=True)
        active.sealed = True
        self._segments.append(self._new_segment(active.end_offset))

    # -- read ------------------------------------------------------------------

    def read(
        self,
        from_offset: int,
        max_bytes: int,
        end_offset: int | None = None,
        max_records: int | None = None,
    ) -> list[rec.Record]:
        """Records with offset >= from_offset, in order, totalling <= max_bytes.

        At least one record is returned whenever any qualifies, even if it
        alone exceeds max_bytes.  ``end_offset`` (exclusive) further bounds the
        read; consumers pass the high watermark here.  ``max_records`` caps
        the record count regardless of byte budget.
        """
        frames = self._collect(from_offset, max_bytes, end_offset, max_records)
        out = []
        for off, frame in frames:
            r, _ = rec.decode_record(frame, 0, off)
            out.append(r)
        return out

    def read_raw(
        self,
        from_offset: int,
        max_bytes: int,
        end_offset: int | None = None,
        max_records: int | None = None,
    ) -> tuple[int, int, bytes]:
        """Like read() but returns (first_offset, count, concatenated frames)."""
        frames = self._collect(from_offset, max_bytes, end_offset, max_records)
        if not frames:
            return from_offset, 0, b""
        return frames[0][0], len(frames), b"".join(f for _, f in frames)

    def _collect(
        self,
        from_offset: int,
        max_bytes: int,
        end_offset: int | None,
        max_records: int | None = None,
    ) -> list[tuple[int, bytes]]:
        for attempt in (0, 1):
            with self._lock:
                if self._closed:
                    raise LogClosed(str(self.dir))
                earliest = self._segments[0].base_offset
                next_off = self._segments[-1].end_offset
                limit = next_off if end_offset is None else min(end_offset, next_off)
                if from_offset < earliest or from_offset > next_off:
                    raise OffsetOutOfRange(
                        f"offset {from_offset} outside [{earliest}, {next_off}]",
                        earliest_offset=earliest,
                        next_offset=next_off,
                    )
                snap = [
                    (seg, seg.record_count, seg.size_bytes)
                    for seg in self._segments
                    if seg.end_offset > from_offset
                ]
            if from_offset >= limit:
                return []
            try:
                return self._collect_from_snapshot(
                    snap, from_offset, max_bytes, limit, max_records
                )
            except FileNotFoundError:
                if attempt:
                    raise
                # segment purged between snapshot and open; retry re-checks bounds
                continue
        raise AssertionError("unreachable")

    def _collect_from_snapshot(
        self,
        snap: list[tuple[_Segment, int, int]],
        from_offset: int,
        max_bytes: int,
        limit: int,
        max_records: int | None,
    ) -> list[tuple[int, bytes]]:
        out: list[tuple[int, bytes]] = []
        budget = max_bytes
        if max_records is not None and max_records <= 0:
            return out
        target = from_offset
        for seg, count, size in snap:
            if target >= limit:
                break
            if seg.base_offset + count <= target:
                continue
            rel_floor, start_pos = (
                seg.index_floor(target) if target > seg.base_offset else (0, 0)
            )
            cur = _Cursor(seg.log_path, start_pos, size)
            try:
                off = seg.base_offset + rel_floor
                while off < limit and seg.base_offset + count > off:
                    frame = cur.next_frame()
                    if frame is None:
                        break
                    if off >= target:
                        if out and budget - len(frame) < 0:
                            return out
                        out.append((off, frame))
                        budget -= len(frame)
                        if budget <= 0:
                            return out
                        if max_records is not None and len(out) >= max_records:
                            return out
                    off += 1
                target = off
            finally:
                cur.close()
        return out

    # -- retention & truncation -------------------------------------------------

    def enforce_retention(self, now_ms: int) -> int:
        """Delete leading sealed segments whose newest record fell out of the
        retention window; returns the purged record count.

        Only a prefix of segments is ever removed so the offset range stays
        dense.  The active segment is never deleted.
        """
        cutoff = now_ms - self.config.retention_ms
        doomed: list[_Segment] = []
        with self._lock:
            if self._closed:
                return 0
            for seg in self._segments[:-1]:
                if seg.max_timestamp_ms < cutoff:
                    doomed.append(seg)
                else:
                    break
            if not doomed:
                return 0
            del self._segments[: len(doomed)]
        purged = 0
        for seg in doomed:
            purged += seg.record_count
            try:
                seg.log_path.unlink(missing_ok=True)
                seg.index_path.unlink(missing_ok=True)
            except OSError as e:
                logger.warning("retention unlink of %s failed: %s", seg.log_path, e)
        return purged

    def truncate_to(self, offset: int) -> int:
        """Discard every record at or beyond ``offset``; returns records dropped.

        Used by replicas reconciling against a new leader.  Truncating below
        earliest_offset empties the log and restarts it at ``offset``.
        """
        with self._lock:
            if self._closed:
                raise LogClosed(str(self.dir))
            next_off = self._segments[-1].end_offset
            if offset >= next_off:
                return 0
            dropped = next_off - offset
            earliest = self._segments[0].base_offset
            if offset <= earliest:
                for seg in self._segments:
                    self._close_segment(seg)
                    seg.log_path.unlink(missing_ok=True)
                    seg.index_path.unlink(missing_ok=True)
                self._segments = [self._new_segment(max(offset, 0))]
                return dropped
            while self._segments and self._segments[-1].base_offset >= offset:
                seg = self._segments.pop()
                self._close_segment(seg)
                seg.log_path.unlink(missing_ok=True)
                seg.index_path.unlink(missing_ok=True)
            keep = self._segments[-1]
            self._close_segment(keep, sync=True)
            data = keep.log_path.read_bytes()
            pos = 0
            count = 0
            max_ts = -(2**63)
            index: list[tuple[int, int]] = []
            since = 0
            for off, p, flen in rec.scan_frames(data, keep.base_offset):
                if off >= offset:
                    break
                if since >= self.config.index_interval_bytes:
                    index.append((count, p))
                    since = 0
                (ts,) = struct.unpack_from(">q", data, p + 9)
                max_ts = max(max_ts, ts)
                since += flen
                count += 1
                pos = p + flen
            with open(keep.log_path, "r+b") as f:
                f.truncate(pos)
                f.flush()
                os.fsync(f.fileno())
            with open(keep.index_path, "wb") as f:
                for entry in index:
                    f.write(_INDEX_ENTRY.pack(*entry))
            keep.record_count = count
            keep.size_bytes = pos
            keep.max_timestamp_ms = max_ts
            keep.index = index
            keep.bytes_since_index = since
            keep.sealed = False
            keep.log_f = open(keep.log_path, "ab")
            keep.index_f = open(keep.index_path, "ab")
            return dropped

    def reset_to(self, base_offset: int) -> int:
        """Drop every record and restart the log at ``base_offset``.

        A replica that fell behind the leader's retention window cannot fill
        the hole; it abandons its copy and rebootstraps from the leader's
        earliest offset.  Returns records dropped.
        """
        with self._lock:
            if self._closed:
                raise LogClosed(str(self.dir))
            dropped = self._segments[-1].end_offset - self._segments[0].base_offset
            for seg in self._segments:
                self._close_segment(seg)
                seg.log_path.unlink(missing_ok=True)
                seg.index_path.unlink(missing_ok=True)
            self._segments = [self._new_segment(base_offset)]
            return dropped

    def segment_bases(self) -> list[int]:
        with self._lock:
            return [s.base_offset for s in self._segments]

    def segment_record_counts(self) -> dict[int, int]:
        with self._lock:
            return {s.base_offset: s.record_count for s in self._segments}
