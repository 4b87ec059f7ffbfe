"""Deterministic trace simulator for the tiered model cache.

``ReferenceCache`` is a deliberately naive re-statement of the placement
rules: it keeps only per-model counters and tier sets, recomputes tier
usage by summation at every step and picks victims by repeated ``min``.
It shares no code with :mod:`mrm.cache`, which is what makes it useful as
an oracle.

On top of it, :func:`simulate` runs a small discrete-event model of
``concurrency`` clients hammering one daemon whose disk and copy engine are
shared, producing modeled latencies from bandwidth/overhead parameters.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

from .stats import geomean, pareto_rank, percentile, uniform_open

FAST, HOST, DISK = "FAST", "HOST", "LOCAL_DISK"


@dataclass(frozen=True)
class SimModel:
    weights: int
    workspace: int = 0
    on_disk: bool = True
    objects: int = 1


@dataclass(frozen=True)
class SimConfig:
    fast_capacity: int
    host_capacity: int
    disk_capacity: int
    policy: str = "lru"
    eager_reclaim: bool = False
    headroom: float = 0.25


@dataclass
class _State:
    seq: int
    refcount: int = 0
    last: float = 0
    uses: int = 0
    tiers: set = field(default_factory=set)


class ReferenceCache:
    def __init__(self, catalog: dict, config: SimConfig):
        self.catalog = catalog
        self.cfg = config
        self.state: dict[Hashable, _State] = {}

    def capacity(self, tier: str) -> int:
        return {FAST: self.cfg.fast_capacity, HOST: self.cfg.host_capacity,
                DISK: self.cfg.disk_capacity}[tier]

    def used(self, tier: str) -> int:
        return sum(self.catalog[k].weights for k, s in self.state.items() if tier in s.tiers)

    def _rank(self, key):
        s = self.state[key]
        if self.cfg.policy == "lru":
            return (s.last, s.seq)
        return (s.uses, s.seq)

    def _pool(self, tier, exclude, taken=()):
        return [k for k, s in self.state.items()
                if tier in s.tiers and s.refcount == 0 and k != exclude and k not in taken]

    def victims(self, tier: str, need: int, exclude) -> Optional[list]:
        chosen: list = []
        while self.capacity(tier) - self.used(tier) + sum(self.catalog[k].weights for k in chosen) < need:
            pool = self._pool(tier, exclude, chosen)
            if not pool:
                return None
            chosen.append(min(pool, key=self._rank))
        return chosen

    def _drop(self, tier, keys, log):
        for k in keys:
            self.state[k].tiers.discard(tier)
            log.append((tier, k))

    def open(self, key, now: float) -> tuple[str, tuple]:
        if key not in self.catalog:
            return "NotFound", ()
        log: list = []
        s = self.state.get(key)
        if s is not None and FAST in s.tiers:
            outcome = "FastHit"
        else:
            if s is None:
                s = self.state[key] = _State(seq=len(self.state))
            w = self.catalog[key].weights
            if HOST in s.tiers:
                outcome = "HostHit"
            elif DISK in s.tiers or self.catalog[key].on_disk:
                outcome = "DiskLoad"
            else:
                outcome = "RemoteFetch"
                if w <= self.cfg.disk_capacity:
                    v = self.victims(DISK, w, key)
                    if v is not None:
                        self._drop(DISK, v, log)
                        s.tiers.add(DISK)
            if w > self.cfg.fast_capacity:
                return "TooLargeForFast", tuple(log)
            v = self.victims(FAST, w, key)
            if v is None:
                return "NoEvictableSpace", tuple(log)
            self._drop(FAST, v, log)
            if outcome != "HostHit" and w <= self.cfg.host_capacity:
                v = self.victims(HOST, w, key)
                if v is not None:
                    self._drop(HOST, v, log)
                    s.tiers.add(HOST)
            s.tiers.add(FAST)
        s.refcount += 1
        s.uses += 1
        s.last = now
        reserve = min(self.catalog[key].workspace, int(self.cfg.headroom * self.cfg.fast_capacity))
        while self.cfg.fast_capacity - self.used(FAST) < reserve:
            pool = self._pool(FAST, key)
            if not pool:
                break
            self._drop(FAST, [min(pool, key=self._rank)], log)
        return outcome, tuple(log)

    def close(self, key) -> tuple[str, tuple]:
        s = self.state.get(key)
        if s is None:
            return "UnknownModel", ()
        if s.refcount == 0:
            return "NotOpen", ()
        s.refcount -= 1
        log: list = []
        if s.refcount == 0 and self.cfg.eager_reclaim and FAST in s.tiers:
            self._drop(FAST, [key], log)
        return "Closed", tuple(log)


def replay(trace: Iterable[tuple[str, Hashable]], catalog: dict, config: SimConfig) -> list:
    """Run an (op, key) trace; timestamps are the step index."""
    ref = ReferenceCache(catalog, config)
    out = []
    for step, (op, key) in enumerate(trace):
        out.append(ref.open(key, step) if op == "open" else ref.close(key))
    return out


def random_trace(rng: random.Random, keys: Sequence, n_ops: int,
                 close_prob: float = 0.45) -> list[tuple[str, Hashable]]:
    """Open/close trace with skewed popularity; closes target keys opened earlier."""
    weights = [1.0 / (i + 1) for i in range(len(keys))]
    outstanding: list = []
    trace = []
    for _ in range(n_ops):
        if outstanding and rng.random() < close_prob:
            key = outstanding.pop(rng.randrange(len(outstanding)))
            trace.append(("close", key))
        else:
            key = rng.choices(keys, weights)[0]
            outstanding.append(key)
            trace.append(("open", key))
    return trace


# -- latency model ------------------------------------------------------------

@dataclass(frozen=True)
class TierLatencies:
    """Bandwidths in bytes/second, per-object overheads in seconds."""

    q: float = 193.30e6
    copy_bandwidth: float = 8e9
    o: float = 1e-3
    s: float = 1e-3
    remote_bandwidth: float = 100e6


def modeled_latency(outcome: str, model: SimModel, lat: TierLatencies) -> float:
    """Time to complete an open of ``model`` with the given outcome, no contention."""
    share = model.objects * (lat.o + lat.s)
    w = model.weights
    io = {
        "FastHit": 0.0,
        "HostHit": w / lat.copy_bandwidth,
        "DiskLoad": w / lat.q + w / lat.copy_bandwidth,
        "RemoteFetch": w / lat.remote_bandwidth + w / lat.q + w / lat.copy_bandwidth,
    }[outcome]
    return io + share


def private_load_latency(model: SimModel, lat: TierLatencies) -> float:
    return model.weights / lat.q + model.weights / lat.copy_bandwidth


def simulate_trace(trace, catalog: dict, config: SimConfig,
                   lat: Optional[TierLatencies] = None) -> list[dict]:
    """Event log for an explicit trace with uncontended modeled latencies."""
    lat = lat or TierLatencies()
    log = []
    for (op, key), (outcome, evicted) in zip(trace, replay(trace, catalog, config)):
        ev = {"op": op, "key": key, "outcome": outcome, "evicted": evicted}
        if op == "open" and key in catalog and outcome in _IO_OUTCOMES:
            ev["latency"] = modeled_latency(outcome, catalog[key], lat)
        log.append(ev)
    return log


_IO_OUTCOMES = ("FastHit", "HostHit", "DiskLoad", "RemoteFetch")


@dataclass(frozen=True)
class SimWorkload:
    keys: tuple
    catalog: dict
    config: SimConfig
    active_fraction: float = 1.0
    concurrency: int = 1
    requests_per_client: int = 200
    warmup: int = 10
    alpha: float = 1.0
    x_m: float = 1.0
    seed: int = 0
    compute_s: float = 0.005
    # When set, split this many measured requests across the clients instead.
    total_requests: Optional[int] = None


def active_models(keys: Sequence, fraction: float, seed: int) -> list:
    """The first ``ceil(fraction * N)`` keys of a seeded shuffle, most popular first."""
    order = list(keys)
    random.Random(seed).shuffle(order)
    n = max(1, math.ceil(fraction * len(order) - 1e-9))
    return order[:n]


def simulate(w: SimWorkload, lat: Optional[TierLatencies] = None) -> dict:
    """Discrete-event run of ``concurrency`` closed-loop clients.

    Loads (and private fallbacks) queue on one shared I/O channel; fast hits
    only pay the share overhead, plus any wait for an in-flight load of the
    same model. Returns per-request records and the cell summary.
    """
    lat = lat or TierLatencies()
    active = active_models(w.keys, w.active_fraction, w.seed)
    # Common random numbers: every cell with the same seed draws the same key stream.
    rng = random.Random(w.seed)
    per_client = w.requests_per_client if w.total_requests is None \
        else math.ceil(w.total_requests / w.concurrency)
    ref = ReferenceCache(w.catalog, w.config)
    io_free = 0.0
    ready_at: dict = {}
    counter = 0
    heap: list = []
    for c in range(w.concurrency):
        heapq.heappush(heap, (0.0, counter, "open", c, None, 0))
        counter += 1
    issued = [0] * w.concurrency
    records = []
    evictions = 0
    while heap:
        t, _, kind, client, key, started = heapq.heappop(heap)
        if kind == "close":
            ref.close(key)
            continue
        if issued[client] >= per_client + w.warmup:
            continue
        n = issued[client]
        issued[client] += 1
        key = active[pareto_rank(uniform_open(rng), w.alpha, w.x_m, len(active)) - 1]
        model = w.catalog[key]
        outcome, evicted = ref.open(key, t)
        evictions += len([e for e in evicted if e[0] == FAST])
        share = model.objects * (lat.o + lat.s)
        if outcome == "FastHit":
            done = max(t, ready_at.get(key, 0.0)) + share
        elif outcome in _IO_OUTCOMES:
            start = max(t, io_free)
            io_free = start + modeled_latency(outcome, model, lat) - share
            ready_at[key] = io_free
            done = io_free + share
        else:
            start = max(t, io_free)
            io_free = start + private_load_latency(model, lat)
            done = io_free
        finish = done + w.compute_s
        if outcome in _IO_OUTCOMES:
            heapq.heappush(heap, (finish, counter, "close", client, key, t))
            counter += 1
        heapq.heappush(heap, (finish, counter, "open", client, None, 0))
        counter += 1
        if n >= w.warmup:
            records.append({"key": key, "outcome": outcome, "latency": finish - t,
                            "evicted": len(evicted)})
    return {"records": records, "evictions": evictions,
            **summarize(records, w.catalog, lat, w.compute_s)}


def summarize(records: list[dict], catalog: dict, lat: TierLatencies, compute_s: float) -> dict:
    by_model: dict = {}
    for r in records:
        by_model.setdefault(r["key"], []).append(r["latency"])
    speedups = []
    for key, lats in by_model.items():
        baseline = private_load_latency(catalog[key], lat) + compute_s
        speedups.append(baseline / percentile(lats, 95))
    hits = sum(r["outcome"] == "FastHit" for r in records)
    penalties = []
    for r in records:
        warm = catalog[r["key"]].objects * (lat.o + lat.s) + compute_s
        penalties.append(r["latency"] / warm - 1.0)
    return {
        "geomean_p95_speedup": geomean(speedups) if speedups else float("nan"),
        "fast_hit_rate": hits / len(records) if records else float("nan"),
        "mean_latency_penalty": sum(penalties) / len(penalties) if penalties else float("nan"),
    }
