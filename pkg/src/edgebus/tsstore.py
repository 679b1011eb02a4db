"""Embedded wide-row time-series store.

Layout: one sorted row file per (series, day bucket), named
``<series-dir>/<bucket_start_ms>.row``.  A row file is a run of framed
points ordered by (timestamp_ms, device_pseudonym, source) followed by a
fixed 32-byte footer (magic, count, min/max timestamp, crc over the
point bytes).  Files are immutable once written; an update rewrites the
whole bucket to a temp file and renames it in, so readers always see a
complete, checksummed row.

Dedup: a point's source (partition, offset) identifies it globally.
Replays of the same record carry identical bytes, hence the identical
timestamp, so they land in the same bucket and the per-bucket source
set drops them.  This is what turns at-least-once delivery into
exactly-once materialization.

One writer owns a store directory (flock); read-only opens skip the
lock so queries can run beside a live writer.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import quote, unquote

from .errors import CorruptRecord, DataDirLocked, InvalidConfig, UnknownSeries

DAY_MS = 86_400_000
ROW_MAGIC = 0x54535231  # "TSR1"
_FOOTER = struct.Struct(">IQqqI")  # magic, count, min_ts, max_ts, crc
_POINT_HEAD = struct.Struct(">qIQdB")  # ts, partition, offset, value, flags
_LATLON = struct.Struct(">dd")
_FLAG_LATLON = 0x01


@dataclass(frozen=True)
class StoredPoint:
    timestamp_ms: int
    device_pseudonym: str
    source: tuple[int, int]  # (partition, offset) provenance
    value: float
    lat: float | None = None
    lon: float | None = None

    @property
    def sort_key(self):
        return (self.timestamp_ms, self.device_pseudonym, self.source)


def bucket_start(timestamp_ms: int, bucket_ms: int = DAY_MS) -> int:
    return (timestamp_ms // bucket_ms) * bucket_ms


def _pack_point(p: StoredPoint) -> bytes:
    flags = _FLAG_LATLON if p.lat is not None else 0
    head = _POINT_HEAD.pack(p.timestamp_ms, p.source[0], p.source[1],
                            p.value, flags)
    loc = _LATLON.pack(p.lat, p.lon) if flags else b""
    dev = p.device_pseudonym.encode("utf-8")
    return head + loc + struct.pack(">H", len(dev)) + dev


def _unpack_point(buf: bytes, pos: int) -> tuple[StoredPoint, int]:
    ts, partition, offset, value, flags = _POINT_HEAD.unpack_from(buf, pos)
    pos += _POINT_HEAD.size
    lat = lon = None
    if flags & _FLAG_LATLON:
        lat, lon = _LATLON.unpack_from(buf, pos)
        pos += _LATLON.size
    (dev_len,) = struct.unpack_from(">H", buf, pos)
    pos += 2
    dev = buf[pos:pos + dev_len].decode("utf-8")
    pos += dev_len
    return StoredPoint(ts, dev, (partition, offset), value, lat, lon), pos


def _series_dirname(series: str) -> str:
    # percent-encode so any series string maps to a flat, safe directory name
    return quote(series, safe="._-")


class _Bucket:
    __slots__ = ("points", "sources")

    def __init__(self):
        self.points: list[StoredPoint] = []
        self.sources: set[tuple[int, int]] = set()


class TsStore:
    """Bucketed point store with upsert/flush/query_range.

    Writes are buffered per bucket and become visible to queries only
    after flush(), so a query never observes half a batch.
    """

    def __init__(self, path, bucket_ms: int = DAY_MS, read_only: bool = False):
        if bucket_ms < 1:
            raise InvalidConfig("bucket_ms must be positive")
        self.path = Path(path)
        self.read_only = read_only
        self._lock_fd = None
        self._buckets: dict[tuple[str, int], _Bucket] = {}
        self._pending: dict[tuple[str, int], list[StoredPoint]] = {}
        self.closed = False
        if read_only:
            if not self.path.is_dir():
                raise InvalidConfig(f"no store at {self.path}")
            self.bucket_ms = self._read_meta()["bucket_ms"]
            if bucket_ms != DAY_MS and bucket_ms != self.bucket_ms:
                raise InvalidConfig("store was created with a different bucket size")
        else:
            self.path.mkdir(parents=True, exist_ok=True)
            self._acquire_lock()
            try:
                meta_path = self.path / "meta.json"
                if meta_path.exists():
                    self.bucket_ms = self._read_meta()["bucket_ms"]
                    if self.bucket_ms != bucket_ms:
                        raise InvalidConfig(
                            f"store uses {self.bucket_ms} ms buckets, not {bucket_ms}")
                else:
                    self.bucket_ms = bucket_ms
                    self._write_json(meta_path, {"v": 1, "bucket_ms": bucket_ms})
            except BaseException:
                os.close(self._lock_fd)
                self._lock_fd = None
                raise

    # -- lifecycle ----------------------------------------------------------

    def _read_meta(self) -> dict:
        try:
            return json.loads((self.path / "meta.json").read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidConfig(f"unreadable store meta: {e}") from None

    def _acquire_lock(self):
        import fcntl
        fd = os.open(self.path / ".lock", os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise DataDirLocked(
                f"{self.path} is in use by another writer") from None
        os.ftruncate(fd, 0)
        os.write(fd, str(os.getpid()).encode())
        self._lock_fd = fd

    @staticmethod
    def _write_json(path: Path, obj: dict):
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(obj, f, sort_keys=True)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    def close(self):
        if self.closed:
            return
        if not self.read_only:
            self.flush()
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None
        self.closed = True

    def abandon(self):
        """Drop the directory lock without flushing, the way a dead process
        would.  Exists so crash tests can reopen the store in-process."""
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None
        self.closed = True

    # -- writing -------------------------------------------------------------

    def upsert(self, series: str, points: list[StoredPoint]) -> int:
        """Stage points for series; returns how many were new (duplicates
        by source are dropped).  Call flush() to make them durable."""
        if self.read_only:
            raise InvalidConfig("store opened read-only")
        if not series:
            raise InvalidConfig("series must be non-empty")
        fresh = 0
        for p in points:
            key = (series, bucket_start(p.timestamp_ms, self.bucket_ms))
            bucket = self._load_bucket(key)
            if p.source in bucket.sources:
                continue
            bucket.sources.add(p.source)
            self._pending.setdefault(key, []).append(p)
            fresh += 1
        return fresh

    def flush(self):
        """Merge staged points into their buckets and rewrite those files."""
        for key, staged in sorted(self._pending.items()):
            bucket = self._buckets[key]
            bucket.points.extend(staged)
            bucket.points.sort(key=lambda p: p.sort_key)
            self._write_bucket(key, bucket.points)
        self._pending.clear()

    def _write_bucket(self, key: tuple[str, int], points: list[StoredPoint]):
        series, start = key
        d = self.path / _series_dirname(series)
        d.mkdir(parents=True, exist_ok=True)
        body = b"".join(_pack_point(p) for p in points)
        if points:
            min_ts = points[0].timestamp_ms
            max_ts = points[-1].timestamp_ms
        else:
            min_ts = max_ts = 0
        footer = _FOOTER.pack(ROW_MAGIC, len(points), min_ts, max_ts,
                              zlib.crc32(body) & 0xFFFFFFFF)
        final = d / f"{start}.row"
        tmp = d / f"{start}.row.tmp"
        with open(tmp, "wb") as f:
            f.write(body)
            f.write(footer)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, final)

    # -- reading ------------------------------------------------------------

    def _series_dir(self, series: str) -> Path:
        return self.path / _series_dirname(series)

    def _load_bucket(self, key: tuple[str, int]) -> _Bucket:
        bucket = self._buckets.get(key)
        if bucket is not None:
            return bucket
        bucket = _Bucket()
        series, start = key
        path = self._series_dir(series) / f"{start}.row"
        if path.exists():
            bucket.points = self._read_row(path)
            bucket.sources = {p.source for p in bucket.points}
        self._buckets[key] = bucket
        return bucket

    @staticmethod
    def _read_row(path: Path) -> list[StoredPoint]:
        blob = path.read_bytes()
        if len(blob) < _FOOTER.size:
            raise CorruptRecord(f"{path}: shorter than its footer")
        magic, count, _min_ts, _max_ts, crc = _FOOTER.unpack(blob[-_FOOTER.size:])
        if magic != ROW_MAGIC:
            raise CorruptRecord(f"{path}: bad magic {magic:#x}")
        body = blob[:-_FOOTER.size]
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise CorruptRecord(f"{path}: checksum mismatch")
        points = []
        pos = 0
        while pos < len(body):
            p, pos = _unpack_point(body, pos)
            points.append(p)
        if len(points) != count:
            raise CorruptRecord(f"{path}: footer count {count}, found {len(points)}")
        return points

    def series_names(self) -> list[str]:
        if not self.path.is_dir():
            return []
        return sorted(unquote(d.name) for d in self.path.iterdir()
                      if d.is_dir())

    def _series_exists(self, series: str) -> bool:
        if self._series_dir(series).is_dir():
            return True
        return any(k[0] == series for k in self._buckets)

    def query_range(self, series: str, t0_ms: int, t1_ms: int) -> list[StoredPoint]:
        """Committed points with t0_ms <= timestamp_ms < t1_ms, ascending by
        (timestamp_ms, device_pseudonym).  Raises UnknownSeries for a series
        the store has never written, as opposed to an empty window."""
        if t0_ms > t1_ms:
            raise InvalidConfig("t0_ms must be <= t1_ms")
        if not self._series_exists(series):
            raise UnknownSeries(f"series {series!r} has never been stored")
        if t0_ms == t1_ms:
            return []
        out: list[StoredPoint] = []
        d = self._series_dir(series)
        # iterate only buckets that exist on disk or in cache, in time order
        on_disk = set()
        if d.is_dir():
            for f in d.glob("*.row"):
                try:
                    on_disk.add(int(f.stem))
                except ValueError:
                    continue
        cached = {k[1] for k in self._buckets if k[0] == series}
        for b in sorted(on_disk | cached):
            if b + self.bucket_ms <= t0_ms or b >= t1_ms:
                continue
            bucket = self._load_bucket((series, b))
            out.extend(p for p in bucket.points
                       if t0_ms <= p.timestamp_ms < t1_ms)
        return out
