"""Store engine tests: bucket layout, ordering, dedup, durability, and
range queries checked against a brute-force oracle.
"""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgebus.errors import (
    CorruptRecord,
    DataDirLocked,
    InvalidConfig,
    UnknownSeries,
)
from edgebus.tsstore import (
    DAY_MS,
    StoredPoint,
    TsStore,
    _pack_point,
    _unpack_point,
    bucket_start,
)


def pt(ts, dev="dev-a", source=None, value=1.0, lat=None, lon=None):
    return StoredPoint(ts, dev, source or (0, ts), value, lat, lon)


def test_bucket_start_floors_to_day():
    assert bucket_start(0) == 0
    assert bucket_start(DAY_MS - 1) == 0
    assert bucket_start(DAY_MS) == DAY_MS
    assert bucket_start(3 * DAY_MS + 12345) == 3 * DAY_MS


def test_point_packing_roundtrip():
    cases = [
        pt(1234, "b0344c61d8db3853", (3, 77), 8.25),
        pt(-5, "d", (0, 0), -0.0, lat=51.1, lon=17.03),
        pt(2**40, "x" * 100, (4294967295, 2**50), 1e300),
    ]
    for p in cases:
        buf = _pack_point(p)
        got, pos = _unpack_point(buf, 0)
        assert pos == len(buf)
        assert got == p


@pytest.fixture
def store(tmp_path):
    s = TsStore(tmp_path / "store")
    yield s
    s.close()


def test_upsert_flush_query_roundtrip(store):
    points = [pt(100, "a"), pt(50, "b"), pt(75, "a")]
    assert store.upsert("noise", points) == 3
    store.flush()
    got = store.query_range("noise", 0, 1000)
    assert [p.timestamp_ms for p in got] == [50, 75, 100]


def test_query_sees_only_flushed_batches(store):
    store.upsert("noise", [pt(10)])
    store.flush()
    store.upsert("noise", [pt(20, source=(0, 21))])
    assert [p.timestamp_ms for p in store.query_range("noise", 0, 100)] == [10]
    store.flush()
    assert [p.timestamp_ms for p in store.query_range("noise", 0, 100)] == [10, 20]


def test_dedup_by_source(store):
    batch = [pt(10, source=(2, 5)), pt(10, source=(2, 6))]
    assert store.upsert("s", batch) == 2
    assert store.upsert("s", batch) == 0  # same sources again
    store.flush()
    assert len(store.query_range("s", 0, 100)) == 2


def test_dedup_survives_reopen(tmp_path):
    s = TsStore(tmp_path / "store")
    s.upsert("s", [pt(10, source=(0, 1)), pt(11, source=(0, 2))])
    s.flush()
    s.close()
    s = TsStore(tmp_path / "store")
    try:
        assert s.upsert("s", [pt(10, source=(0, 1)), pt(12, source=(0, 3))]) == 1
        s.flush()
        assert [p.timestamp_ms for p in s.query_range("s", 0, 100)] == [10, 11, 12]
    finally:
        s.close()


def test_unknown_series_distinct_from_empty_window(store):
    store.upsert("known", [pt(5 * DAY_MS)])
    store.flush()
    assert store.query_range("known", 0, 100) == []  # seen, empty window
    with pytest.raises(UnknownSeries):
        store.query_range("never", 0, 100)


def test_empty_window_t0_equals_t1(store):
    store.upsert("s", [pt(10)])
    store.flush()
    assert store.query_range("s", 10, 10) == []
    with pytest.raises(InvalidConfig):
        store.query_range("s", 10, 9)


def test_window_bounds_are_half_open(store):
    store.upsert("s", [pt(10), pt(20, source=(0, 99))])
    store.flush()
    got = store.query_range("s", 10, 20)
    assert [p.timestamp_ms for p in got] == [10]


def test_day_boundary_window_spans_buckets(store):
    last_of_day = DAY_MS - 1          # 23:59:59.999
    first_of_next = DAY_MS            # 00:00:00.000
    store.upsert("s", [pt(first_of_next, source=(0, 2)),
                       pt(last_of_day, source=(0, 1))])
    store.flush()
    assert (store.path / "s" / "0.row").exists()
    assert (store.path / "s" / f"{DAY_MS}.row").exists()
    got = store.query_range("s", DAY_MS - 1000, DAY_MS + 1000)
    assert [p.timestamp_ms for p in got] == [last_of_day, first_of_next]


def test_order_within_tie_is_device_then_source(store):
    batch = [
        pt(10, "b", (0, 3)),
        pt(10, "a", (0, 2)),
        pt(10, "a", (0, 1)),
    ]
    store.upsert("s", batch)
    store.flush()
    got = store.query_range("s", 0, 100)
    assert [(p.device_pseudonym, p.source) for p in got] == [
        ("a", (0, 1)), ("a", (0, 2)), ("b", (0, 3))]


def test_query_matches_bruteforce_oracle(tmp_path):
    rng = random.Random(4242)
    s = TsStore(tmp_path / "store")
    inserted: list[StoredPoint] = []
    try:
        for batch_no in range(20):
            batch = []
            for i in range(50):
                ts = rng.randrange(0, 3 * DAY_MS)
                p = StoredPoint(ts, f"dev-{rng.randrange(8)}",
                                (batch_no, len(inserted) + i),
                                rng.uniform(-100, 100))
                batch.append(p)
            inserted.extend(batch)
            s.upsert("mix", batch)
            s.flush()
        for _ in range(200):
            a = rng.randrange(-1000, 3 * DAY_MS + 1000)
            b = rng.randrange(-1000, 3 * DAY_MS + 1000)
            t0, t1 = min(a, b), max(a, b)
            want = sorted(
                (p for p in inserted if t0 <= p.timestamp_ms < t1),
                key=lambda p: (p.timestamp_ms, p.device_pseudonym, p.source))
            assert s.query_range("mix", t0, t1) == want
    finally:
        s.close()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2 * DAY_MS - 1),
                          st.sampled_from(["a", "b", "c"])),
                min_size=0, max_size=40),
       st.integers(0, 2 * DAY_MS), st.integers(0, 2 * DAY_MS))
def test_adjacent_bucket_merge_never_inverts(tmp_path_factory, entries, x, y):
    t0, t1 = min(x, y), max(x, y)
    s = TsStore(tmp_path_factory.mktemp("prop") / "store")
    try:
        points = [StoredPoint(ts, dev, (0, i), float(i))
                  for i, (ts, dev) in enumerate(entries)]
        s.upsert("s", points)
        s.flush()
        if not points:
            return
        got = s.query_range("s", t0, t1)
        keys = [(p.timestamp_ms, p.device_pseudonym, p.source) for p in got]
        assert keys == sorted(keys)
        assert all(t0 <= p.timestamp_ms < t1 for p in got)
        assert len(got) == sum(1 for p in points if t0 <= p.timestamp_ms < t1)
    finally:
        s.close()


def test_corrupt_row_detected(tmp_path):
    s = TsStore(tmp_path / "store")
    s.upsert("s", [pt(10), pt(20, source=(0, 99))])
    s.flush()
    s.close()
    row = tmp_path / "store" / "s" / "0.row"
    blob = bytearray(row.read_bytes())
    blob[3] ^= 0xFF  # flip a byte inside the first point
    row.write_bytes(bytes(blob))
    s = TsStore(tmp_path / "store")
    try:
        with pytest.raises(CorruptRecord):
            s.query_range("s", 0, 100)
    finally:
        s.close()


def test_bucket_size_fixed_at_creation(tmp_path):
    s = TsStore(tmp_path / "store", bucket_ms=3_600_000)
    s.close()
    with pytest.raises(InvalidConfig):
        TsStore(tmp_path / "store", bucket_ms=DAY_MS)
    s = TsStore(tmp_path / "store", bucket_ms=3_600_000)
    s.close()


def test_second_writer_is_locked_out(tmp_path):
    s = TsStore(tmp_path / "store")
    try:
        with pytest.raises(DataDirLocked):
            TsStore(tmp_path / "store")
    finally:
        s.close()
    # released on close
    TsStore(tmp_path / "store").close()


def test_read_only_open_beside_writer(tmp_path):
    w = TsStore(tmp_path / "store")
    try:
        w.upsert("s", [pt(10)])
        w.flush()
        r = TsStore(tmp_path / "store", read_only=True)
        assert [p.timestamp_ms for p in r.query_range("s", 0, 100)] == [10]
        with pytest.raises(InvalidConfig):
            r.upsert("s", [pt(20)])
        r.close()
    finally:
        w.close()


def test_series_names_survive_odd_characters(tmp_path):
    s = TsStore(tmp_path / "store")
    try:
        odd = ["plain", "with space", "slash/y", "dots.and-dash_ok", "unié"]
        for i, name in enumerate(odd):
            s.upsert(name, [pt(10, source=(0, i))])
        s.flush()
        assert s.series_names() == sorted(odd)
        for name in odd:
            assert len(s.query_range(name, 0, 100)) == 1
        # nothing escaped the store directory
        for sub in (tmp_path / "store").iterdir():
            assert "/" not in sub.name
    finally:
        s.close()
