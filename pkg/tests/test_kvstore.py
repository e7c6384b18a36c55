import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geartrain.kvstore import KVStore, LogicalClock, NotFound, WallClock, make_clock
from geartrain.tensor import DimensionError


class TestImages:
    def test_round_trip_and_last_write_wins(self):
        kv = KVStore()
        x, y = np.arange(4.0), np.ones(4)
        kv.put_image(7, x)
        np.testing.assert_array_equal(kv.get_image(7), x)
        kv.put_image(7, y)
        np.testing.assert_array_equal(kv.get_image(7), y)

    def test_missing(self):
        with pytest.raises(NotFound):
            KVStore().get_image(99)

    def test_stored_copy_is_isolated(self):
        kv = KVStore()
        x = np.zeros(3)
        kv.put_image(1, x)
        x[0] = 5
        assert kv.get_image(1)[0] == 0


class TestCache:
    def test_put_then_get_hits(self):
        kv = KVStore(2)
        kv.cache_put_dfv(1, [1.0, 2.0], now=0)
        np.testing.assert_array_equal(kv.cache_get_dfv(1, now=0, ttl=0.5), [1, 2])

    def test_refresh_resets_age(self):
        kv = KVStore(1)
        kv.cache_put_dfv(1, [1.0], now=0)
        kv.cache_put_dfv(1, [2.0], now=4)
        assert kv.cache_get_dfv(1, now=6, ttl=5)[0] == 2.0

    def test_distinct_ids(self):
        kv = KVStore(1)
        kv.cache_put_dfv(1, [1.0], 0)
        kv.cache_put_dfv(2, [2.0], 0)
        assert kv.cache_get_dfv(1, 0, 1)[0] == 1.0 and kv.cache_get_dfv(2, 0, 1)[0] == 2.0

    def test_boundary_is_exclusive(self):
        kv = KVStore(1)
        kv.cache_put_dfv(1, [1.0], now=0)
        assert kv.cache_get_dfv(1, now=5, ttl=10) is not None
        assert kv.cache_get_dfv(1, now=10, ttl=10) is None
        assert kv.cache_get_dfv(2, now=0, ttl=10) is None

    def test_ttl_zero_always_misses(self):
        kv = KVStore(1)
        kv.cache_put_dfv(1, [1.0], now=3)
        assert kv.cache_get_dfv(1, now=3, ttl=0) is None

    def test_negative_ttl(self):
        with pytest.raises(ValueError):
            KVStore(1).cache_get_dfv(1, 0, -1)

    def test_evict(self):
        kv = KVStore(1)
        assert kv.evict_expired(now=0, ttl=4) == 0
        for i, created in enumerate([6, 4, 0]):  # ages 2, 4, 8 at now=8
            kv.cache_put_dfv(i, [0.0], created)
        assert kv.evict_expired(now=8, ttl=4) == 2
        assert kv.cache_size() == 1 and kv.cache_entry(0) is not None
        assert kv.evict_expired(now=8, ttl=4) == 0


class TestAccumulator:
    def test_m1_every_push_ready(self):
        kv = KVStore(2)
        out = kv.accum_push(3, np.array([1.0, -1.0], np.float32), 1)
        np.testing.assert_array_equal(out, [1, -1])

    def test_identical_vectors(self):
        kv = KVStore(2)
        g = np.array([0.5, 0.25], np.float32)
        assert kv.accum_push(1, g, 3) is None
        assert kv.accum_push(1, g, 3) is None
        np.testing.assert_array_equal(kv.accum_push(1, g, 3), g)
        assert kv.pending_count(1) == 0

    def test_arithmetic_mean(self):
        kv = KVStore(2)
        assert kv.accum_push(1, np.array([1.0, 3.0]), 2) is None
        np.testing.assert_array_equal(kv.accum_push(1, np.array([3.0, 5.0]), 2), [2, 4])

    def test_dimension_mismatch(self):
        kv = KVStore(2)
        with pytest.raises(DimensionError):
            kv.accum_push(1, np.zeros(3), 2)
        with pytest.raises(ValueError):
            kv.accum_push(1, np.zeros(2), 0)

    def test_discard_pending(self):
        kv = KVStore(1)
        for i in range(5):
            kv.accum_push(i % 2, np.zeros(1), 4)
        assert kv.discard_pending() == 5
        assert kv.pending_count(0) == 0

    def test_concurrent_pushes_neither_lost_nor_doubled(self):
        kv = KVStore(1)
        m, threads, per = 4, 8, 500
        ready = []
        lock = threading.Lock()

        def worker():
            for _ in range(per):
                out = kv.accum_push(0, np.ones(1, np.float32), m)
                if out is not None:
                    with lock:
                        ready.append(out)

        ts = [threading.Thread(target=worker) for _ in range(threads)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert len(ready) == threads * per // m
        assert kv.pending_count(0) == threads * per % m
        assert all(r[0] == 1.0 for r in ready)


def test_tables_are_independent():
    kv = KVStore(1)
    kv.put_image(1, np.zeros(1))
    kv.accum_push(1, np.zeros(1), 3)
    kv.cache_put_dfv(1, [1.0], 0)
    kv.evict_expired(100, 1)
    kv.discard_pending()
    assert kv.has_image(1) and kv.cache_size() == 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(1, 30), st.integers(1, 5)), max_size=200),
       st.integers(1, 5))
def test_accumulator_fires_floor_n_over_m(pushes, m):
    kv = KVStore(1)
    counts, fired, pending = {}, {}, {}
    for image_id, value, _ in pushes:
        g = np.array([value / 7.0], np.float32)
        pending.setdefault(image_id, []).append(float(g[0]))
        counts[image_id] = counts.get(image_id, 0) + 1
        out = kv.accum_push(image_id, g, m)
        if out is not None:
            fired[image_id] = fired.get(image_id, 0) + 1
            ref = np.mean(np.array(pending.pop(image_id), np.float64))
            assert abs(float(out[0]) - ref) <= 1e-6
    for image_id, n in counts.items():
        assert fired.get(image_id, 0) == n // m


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["put", "get", "tick", "evict"]), st.integers(0, 7),
                          st.integers(0, 3)), max_size=300),
       st.integers(0, 6))
def test_no_stale_dfv_served(ops, ttl):
    clock, kv = LogicalClock(), KVStore(1)
    written = {}
    for op, image_id, n in ops:
        now = clock.now()
        if op == "put":
            kv.cache_put_dfv(image_id, [float(now)], now)
            written[image_id] = now
        elif op == "get":
            out = kv.cache_get_dfv(image_id, now, ttl)
            if out is not None:
                # the value is its creation time
                assert now - out[0] < ttl
                assert out[0] == written[image_id]
        elif op == "tick":
            clock.tick(n)
        else:
            kv.evict_expired(now, ttl)
            assert all(now - kv.cache_entry(k).created_at < ttl for k in written if kv.cache_entry(k))


def test_clocks():
    c = make_clock("logical")
    assert c.now() == 0 and c.tick() == 1 and c.tick(3) == 4
    with pytest.raises(ValueError):
        c.tick(-1)
    w = make_clock("wall")
    assert isinstance(w, WallClock) and w.now() >= 0
    with pytest.raises(ValueError):
        make_clock("sundial")
