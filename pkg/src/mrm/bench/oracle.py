"""Randomized differential check: ``mrm.cache.ModelCache`` vs ``ReferenceCache``."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from ..cache import CacheConfig, CacheTier, EvictionPolicy, MemoryStorage, ModelCache
from ..errors import MRMError
from ..format import ModelKey
from .sim import ReferenceCache, SimConfig, SimModel, random_trace

MAX_MODELS = 64
MAX_OPS = 10_000


@dataclass
class Scenario:
    catalog: dict
    config: SimConfig
    trace: list
    unknown: list = field(default_factory=list)


def random_scenario(rng: random.Random, max_models: int = MAX_MODELS,
                    max_ops: int = MAX_OPS, policy: str | None = None) -> Scenario:
    n_models = rng.randint(1, max_models)
    fast = rng.randint(1_000, 100_000)
    catalog = {}
    for i in range(n_models):
        # Mostly models that fit a few at a time, some tiny, a few oversized.
        r = rng.random()
        if r < 0.05:
            weights = rng.randint(fast + 1, 2 * fast)
        elif r < 0.15:
            weights = rng.randint(0, fast // 50 + 1)
        else:
            weights = rng.randint(1, max(1, fast // rng.choice([2, 3, 5, 8])))
        workspace = rng.choice([0, 0, rng.randint(0, fast)])
        catalog[ModelKey("sim", f"m{i}", "1")] = SimModel(weights, workspace, rng.random() < 0.6)
    config = SimConfig(
        fast_capacity=fast,
        host_capacity=rng.randint(fast // 2, fast * 3),
        disk_capacity=rng.randint(fast // 2, fast * 4),
        policy=policy or rng.choice(["lru", "lcu"]),
        eager_reclaim=rng.random() < 0.2,
        headroom=rng.choice([0.0, 0.1, 0.25, 0.5]),
    )
    unknown = [ModelKey("sim", f"absent{i}", "1") for i in range(rng.randint(0, 2))]
    keys = list(catalog) + unknown
    rng.shuffle(keys)
    # Log-uniform trace length so most traces are short but some hit the cap.
    n_ops = min(max_ops, int(math.exp(rng.uniform(math.log(10), math.log(max_ops + 1)))))
    return Scenario(catalog, config, random_trace(rng, keys, n_ops), unknown)


def build_cache(sc: Scenario) -> tuple[ModelCache, MemoryStorage]:
    storage = MemoryStorage({k: (m.weights, m.workspace, m.on_disk) for k, m in sc.catalog.items()})
    cfg = CacheConfig(
        fast_capacity_bytes=sc.config.fast_capacity,
        host_capacity_bytes=sc.config.host_capacity,
        disk_capacity_bytes=sc.config.disk_capacity,
        policy=EvictionPolicy.parse(sc.config.policy),
        eager_reclaim=sc.config.eager_reclaim,
        workspace_headroom_fraction=sc.config.headroom,
    )
    return ModelCache(cfg, storage), storage


@dataclass
class CheckReport:
    traces: int = 0
    ops: int = 0
    divergences: list = field(default_factory=list)
    pinned_violations: int = 0
    budget_violations: int = 0
    refcount_violations: int = 0
    evictions: int = 0

    @property
    def ok(self) -> bool:
        return not (self.divergences or self.pinned_violations
                    or self.budget_violations or self.refcount_violations)


def run_scenario(sc: Scenario, report: CheckReport) -> None:
    cache, storage = build_cache(sc)
    ref = ReferenceCache(sc.catalog, sc.config)

    def check_pinned(key):
        if cache.refcount(key) != 0:
            report.pinned_violations += 1

    storage.on_drop_fast = check_pinned
    opens: dict = {}
    budgets = list(cache.budgets.values())
    for step, (op, key) in enumerate(sc.trace):
        if op == "open":
            expected = ref.open(key, step)
            try:
                res = cache.open(key, now=step)
                got = (res.outcome.value, tuple((t.name, k) for t, k in res.evicted))
                opens[key] = opens.get(key, 0) + 1
            except MRMError as exc:
                got = (type(exc).__name__, tuple((t.name, k) for t, k in getattr(exc, "evicted", ())))
        else:
            expected = ref.close(key)
            try:
                _, ev = cache.close_collect(key)
                got = ("Closed", tuple((t.name, k) for t, k in ev))
                opens[key] -= 1
            except MRMError as exc:
                got = (type(exc).__name__, ())
        report.ops += 1
        report.evictions += len(got[1])
        if got != expected:
            report.divergences.append((report.traces, step, op, key, got, expected))
            break
        for b in budgets:
            if not 0 <= b.used_bytes <= b.capacity_bytes:
                report.budget_violations += 1
        if op == "close" or got[0] in ("FastHit", "HostHit", "DiskLoad", "RemoteFetch"):
            if cache.refcount(key) != opens.get(key, 0):
                report.refcount_violations += 1
    # Accounting identity at quiescence.
    fast_resident = sum(e.weights_bytes for e in cache.entries() if CacheTier.FAST in e.residency)
    if fast_resident != cache.budgets[CacheTier.FAST].used_bytes:
        report.budget_violations += 1
    report.traces += 1


def oracle_check(n_traces: int = 1000, seed: int = 0, max_models: int = MAX_MODELS,
                 max_ops: int = MAX_OPS) -> CheckReport:
    rng = random.Random(seed)
    report = CheckReport()
    for i in range(n_traces):
        policy = "lru" if i % 2 == 0 else "lcu"
        run_scenario(random_scenario(rng, max_models, max_ops, policy), report)
    return report
