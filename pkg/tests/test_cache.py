import random
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from mrm.bench.oracle import CheckReport, random_scenario, run_scenario
from mrm.cache import (
    CacheConfig,
    CacheTier,
    EvictionPolicy,
    MemoryStorage,
    ModelCache,
    ModelEntry,
    Outcome,
    evict_candidates,
)
from mrm.errors import NoEvictableSpace, NotFound, NotOpen, TooLargeForFast, UnknownModel
from mrm.format import ModelKey

MB = 10**6
A, B, C, D = (ModelKey("t", n, "1") for n in "ABCD")


def make(catalog, fast=1000 * MB, host=None, disk=None, **kw):
    storage = MemoryStorage({k: (w, ws, True) if not isinstance(w, tuple) else w
                             for k, (w, ws) in catalog.items()})
    cfg = CacheConfig(fast, host if host is not None else fast, disk if disk is not None else fast * 4, **kw)
    return ModelCache(cfg, storage), storage


def fast_used(cache):
    return cache.budgets[CacheTier.FAST].used_bytes


def test_disk_load_then_fast_hit():
    cache, storage = make({A: (200 * MB, 0)})
    r = cache.open(A, now=1)
    assert r.outcome is Outcome.DISK_LOAD
    assert cache.refcount(A) == 1 and fast_used(cache) == 200 * MB
    r2 = cache.open(A, now=2)
    assert r2.outcome is Outcome.FAST_HIT and cache.refcount(A) == 2
    assert storage.counters["read"] == 1
    assert r2.timings["disk_read"] == 0 and r2.timings["fetch"] == 0


def test_lru_evicts_least_recent():
    cache, _ = make({A: (600 * MB, 0), B: (300 * MB, 0), C: (500 * MB, 0)})
    cache.open(A, now=1)
    cache.close(A)
    cache.open(B, now=2)
    cache.close(B)
    r = cache.open(C, now=3)
    assert r.outcome is Outcome.DISK_LOAD
    assert [(t, k) for t, k in r.evicted if t is CacheTier.FAST] == [(CacheTier.FAST, A)]
    assert fast_used(cache) == 800 * MB


def test_close_semantics():
    cache, _ = make({A: (10, 0)})
    with pytest.raises(UnknownModel):
        cache.close(A)
    cache.open(A, now=1)
    assert cache.close(A) == 0
    with pytest.raises(NotOpen):
        cache.close(A)
    assert cache.open(A, now=2).outcome is Outcome.FAST_HIT


def test_eager_reclaim_releases_fast():
    cache, _ = make({A: (10, 0)}, eager_reclaim=True)
    before = fast_used(cache)
    cache.open(A, now=1)
    cache.close(A)
    assert fast_used(cache) == before
    assert cache.open(A, now=2).outcome is Outcome.HOST_HIT


def test_errors():
    cache, _ = make({A: (2000 * MB, 0), B: (600 * MB, 0), C: (600 * MB, 0)})
    with pytest.raises(NotFound):
        cache.open(D)
    with pytest.raises(TooLargeForFast):
        cache.open(A)
    cache.open(B, now=1)
    with pytest.raises(NoEvictableSpace):
        cache.open(C, now=2)
    assert cache.refcount(C) == 0 and fast_used(cache) == 600 * MB


def test_remote_fetch_goes_through_disk():
    storage = MemoryStorage({A: (100, 0, False)})
    cache = ModelCache(CacheConfig(1000, 1000, 1000), storage)
    assert cache.open(A, now=1).outcome is Outcome.REMOTE_FETCH
    assert CacheTier.LOCAL_DISK in cache.entry(A).residency
    cache.close(A)
    cache.reclaim(CacheTier.FAST, 1000)
    cache.reclaim(CacheTier.HOST, 1000)
    assert cache.open(A, now=2).outcome is Outcome.DISK_LOAD
    assert storage.counters["fetch"] == 1


def entry(key, seq, rc=0, t=0, uses=0):
    return ModelEntry(key, seq, refcount=rc, last_access=t, use_count=uses)


def test_evict_candidates_examples():
    a, b, c = entry(A, 0, 0, 1, 5), entry(B, 1, 0, 2, 2), entry(C, 2, 1, 0, 0)
    assert evict_candidates(EvictionPolicy.LRU, [a, b, c]) == [a, b]
    assert evict_candidates(EvictionPolicy.LCU, [a, b, c]) == [b, a]
    assert evict_candidates(EvictionPolicy.LRU, [entry(A, 0, 1), entry(B, 1, 2)]) == []
    # Ties go to the older insertion.
    x, y = entry(A, 5, t=3), entry(B, 2, t=3)
    assert evict_candidates(EvictionPolicy.LRU, [x, y]) == [y, x]


def test_reclaim_greedy():
    cache, _ = make({A: (150, 0), B: (250, 0), C: (10, 0)}, fast=500)
    for i, k in enumerate((A, B), 1):
        cache.open(k, now=i)
        cache.close(k)
    assert cache.budgets[CacheTier.FAST].free_bytes == 100
    assert cache.reclaim(CacheTier.FAST, 300) == [A, B]
    assert cache.budgets[CacheTier.FAST].free_bytes == 500
    assert cache.reclaim(CacheTier.FAST, 100) == []
    cache.open(C, now=5)
    with pytest.raises(NoEvictableSpace):
        cache.reclaim(CacheTier.FAST, 500)


def test_stats_counts_and_identity():
    cache, _ = make({A: (100, 0), B: (50, 0)})
    s = cache.stats()
    assert all(v == 0 for t in s["tiers"].values() for k, v in t.items() if k != "capacity_bytes")
    cache.open(A, now=1)
    cache.open(A, now=2)
    cache.open(B, now=3)
    s = cache.stats()
    assert s["tiers"]["FAST"]["hits"] == 1 and s["tiers"]["FAST"]["misses"] == 2
    assert s["tiers"]["FAST"]["used_bytes"] == 150
    assert s["models"][str(A)]["refcount"] == 2 and s["models"][str(A)]["use_count"] == 2


def test_workspace_reservation_evicts_idle_models():
    cache, _ = make({A: (400, 0), B: (400, 0), C: (100, 300)}, fast=1000, workspace_headroom_fraction=0.25)
    for i, k in enumerate((A, B), 1):
        cache.open(k, now=i)
        cache.close(k)
    r = cache.open(C, now=3)
    # 100 free after loading C; reserving min(300, 250) evicts the least recent idle model.
    assert [k for t, k in r.evicted if t is CacheTier.FAST] == [A]


class SlowStorage(MemoryStorage):
    def read(self, key, manifest, staged=None):
        time.sleep(0.05)
        return super().read(key, manifest, staged)


def test_single_flight():
    storage = SlowStorage({A: (100, 0, True)})
    cache = ModelCache(CacheConfig(1000, 1000, 1000), storage)
    outcomes = []
    barrier = threading.Barrier(8)

    def worker():
        barrier.wait()
        outcomes.append(cache.open(A).outcome)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert storage.counters["read"] == 1
    assert sorted(o.value for o in outcomes) == ["DiskLoad"] + ["FastHit"] * 7
    assert cache.refcount(A) == 8 and fast_used(cache) == 100


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_randomized_traces_match_reference(seed):
    report = CheckReport()
    run_scenario(random_scenario(random.Random(seed), max_models=12, max_ops=400), report)
    assert report.ok, report.divergences[:1]


def fast_hits(trace, sizes, fast):
    storage = MemoryStorage({k: (w, 0, True) for k, w in sizes.items()})
    cache = ModelCache(CacheConfig(fast, fast, fast * 8, workspace_headroom_fraction=0.0), storage)
    hits = 0
    open_counts = {}
    for step, (op, k) in enumerate(trace):
        if op == "open":
            try:
                hits += cache.open(k, now=step).outcome is Outcome.FAST_HIT
                open_counts[k] = open_counts.get(k, 0) + 1
            except (NoEvictableSpace, TooLargeForFast):
                pass
        elif open_counts.get(k):
            cache.close(k)
            open_counts[k] -= 1
    return hits


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.lists(st.tuples(st.booleans(), st.integers(0, 7)), max_size=80))
def test_hit_monotonicity_uniform_sizes(n_models, slots, ops):
    # Unit-size LRU is a stack algorithm, so more capacity never loses a hit.
    keys = [ModelKey("t", f"m{i}", "1") for i in range(n_models)]
    trace = []
    for is_open, i in ops:
        k = keys[i % n_models]
        trace += [("open", k), ("close", k)] if is_open else [("open", k)]
    sizes = {k: 10 for k in keys}
    assert fast_hits(trace, sizes, 20 * slots) >= fast_hits(trace, sizes, 10 * slots)
