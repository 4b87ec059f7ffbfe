"""Placement manager: the model database and its tiered residency state machine.

A model lives in any subset of four tiers. Opening a model always ends
with it resident in the fast tier and its reference count bumped; the
outcome records which tier the bytes came from::

    Fast hit   -> hand out the existing segments
    Host hit   -> copy the host buffer into a new fast segment
    Disk load  -> read + verify the artifact, keep a host copy, publish
    Remote     -> fetch into the disk cache first, then as a disk load

Entries with a nonzero reference count are never evicted. All bookkeeping
happens under one lock; disk and network I/O for a key happen outside it,
guarded by a per-key ``loading`` flag so concurrent cold opens coalesce
into a single load.
"""

from __future__ import annotations

import enum
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Protocol

from .errors import MRMError, NoEvictableSpace, NotFound, NotOpen, TooLargeForFast, UnknownModel
from .format import FootprintEstimate, ModelKey, ModelManifest, estimate_footprint
from .segment import MODEL, ObjectLayout, SegmentHandle, ShareGranularity, layout_for


class CacheTier(enum.IntEnum):
    FAST = 0
    HOST = 1
    LOCAL_DISK = 2
    REMOTE = 3


class EvictionPolicy(enum.Enum):
    LRU = "lru"
    LCU = "lcu"

    @classmethod
    def parse(cls, value: "str | EvictionPolicy") -> "EvictionPolicy":
        return value if isinstance(value, cls) else cls(str(value).lower())


class Outcome(enum.Enum):
    FAST_HIT = "FastHit"
    HOST_HIT = "HostHit"
    DISK_LOAD = "DiskLoad"
    REMOTE_FETCH = "RemoteFetch"


_OUTCOME_FOR_SOURCE = {
    CacheTier.HOST: Outcome.HOST_HIT,
    CacheTier.LOCAL_DISK: Outcome.DISK_LOAD,
    CacheTier.REMOTE: Outcome.REMOTE_FETCH,
}

PHASES = ("fetch", "disk_read", "host_to_fast_copy", "handle_export")


@dataclass
class TierBudget:
    tier: CacheTier
    capacity_bytes: int
    used_bytes: int = 0

    @property
    def free_bytes(self) -> int:
        return self.capacity_bytes - self.used_bytes


@dataclass(eq=False)
class ModelEntry:
    key: ModelKey
    seq: int
    manifest: Optional[ModelManifest] = None
    refcount: int = 0
    last_access: float = 0
    use_count: int = 0
    residency: set = field(default_factory=set)
    fast_segments: Optional[list] = None
    host_copy: Any = None
    disk_path: Optional[str] = None
    loading: bool = False
    weights_bytes: int = 0

    @property
    def model_id(self) -> int:
        return self.seq + 1


@dataclass(frozen=True)
class PlacementResult:
    outcome: Outcome
    model_id: int
    segments: tuple[SegmentHandle, ...]
    layout: ObjectLayout
    footprint: FootprintEstimate
    timings: dict
    evicted: tuple[tuple[CacheTier, ModelKey], ...] = ()
    manifest: Optional[ModelManifest] = None


def evict_candidates(policy: EvictionPolicy, entries: Iterable[ModelEntry]) -> list[ModelEntry]:
    """Unpinned entries in eviction order; ties go to the older entry."""
    eligible = [e for e in entries if e.refcount == 0]
    if policy is EvictionPolicy.LRU:
        return sorted(eligible, key=lambda e: (e.last_access, e.seq))
    return sorted(eligible, key=lambda e: (e.use_count, e.seq))


class Storage(Protocol):
    """The byte-moving side of the cache; every call may block on I/O."""

    def locate(self, key: ModelKey) -> Optional[CacheTier]: ...
    def describe(self, key: ModelKey) -> ModelManifest: ...
    def fetch(self, key: ModelKey) -> tuple[ModelManifest, Any]: ...
    def admit(self, key: ModelKey, staged: Any) -> Optional[str]: ...
    def discard(self, key: ModelKey, staged: Any) -> None: ...
    def read(self, key: ModelKey, manifest: ModelManifest, staged: Any = None) -> Any: ...
    def publish(self, key: ModelKey, manifest: ModelManifest, blob: Any) -> list: ...
    def drop_fast(self, key: ModelKey, segments: list) -> None: ...
    def drop_disk(self, key: ModelKey) -> None: ...


@dataclass
class CacheConfig:
    fast_capacity_bytes: int
    host_capacity_bytes: int
    disk_capacity_bytes: int
    policy: EvictionPolicy = EvictionPolicy.LRU
    eager_reclaim: bool = False
    workspace_headroom_fraction: float = 0.25


class ModelCache:
    def __init__(self, config: CacheConfig, storage: Storage, clock=time.monotonic):
        self.config = config
        self.storage = storage
        self.clock = clock
        self._cond = threading.Condition(threading.RLock())
        self._entries: dict[ModelKey, ModelEntry] = {}
        self._seq = itertools.count()
        self.budgets = {
            CacheTier.FAST: TierBudget(CacheTier.FAST, config.fast_capacity_bytes),
            CacheTier.HOST: TierBudget(CacheTier.HOST, config.host_capacity_bytes),
            CacheTier.LOCAL_DISK: TierBudget(CacheTier.LOCAL_DISK, config.disk_capacity_bytes),
        }
        self._tier_stats = {t: {"hits": 0, "misses": 0, "evictions": 0} for t in CacheTier}

    # -- queries ------------------------------------------------------------

    def entry(self, key: ModelKey) -> Optional[ModelEntry]:
        with self._cond:
            return self._entries.get(key)

    def refcount(self, key: ModelKey) -> int:
        with self._cond:
            e = self._entries.get(key)
            return e.refcount if e else 0

    def entries(self) -> list[ModelEntry]:
        with self._cond:
            return list(self._entries.values())

    def stats(self) -> dict:
        with self._cond:
            tiers = {}
            for tier in CacheTier:
                b = self.budgets.get(tier)
                tiers[tier.name] = dict(
                    self._tier_stats[tier],
                    used_bytes=b.used_bytes if b else 0,
                    capacity_bytes=b.capacity_bytes if b else 0,
                )
            models = {
                str(e.key): {
                    "key": e.key,
                    "refcount": e.refcount,
                    "use_count": e.use_count,
                    "residency": sorted(t.name for t in e.residency),
                }
                for e in self._entries.values()
            }
            return {"tiers": tiers, "models": models}

    # -- open / close -------------------------------------------------------

    def open(self, key: ModelKey, granularity: ShareGranularity = MODEL,
             now: Optional[float] = None) -> PlacementResult:
        with self._cond:
            while True:
                entry = self._entries.get(key)
                if entry is None or not entry.loading:
                    break
                self._cond.wait()
            if entry is not None and CacheTier.FAST in entry.residency:
                return self._grant(entry, Outcome.FAST_HIT, granularity, now, [], _zero_timings())
            source = self._source(key, entry)
            if entry is None:
                entry = self._entries[key] = ModelEntry(key, next(self._seq))
            entry.loading = True
        try:
            return self._load(entry, source, granularity, now)
        finally:
            with self._cond:
                entry.loading = False
                self._cond.notify_all()

    def _source(self, key: ModelKey, entry: Optional[ModelEntry]) -> CacheTier:
        if entry is not None and CacheTier.HOST in entry.residency:
            return CacheTier.HOST
        if entry is not None and CacheTier.LOCAL_DISK in entry.residency:
            return CacheTier.LOCAL_DISK
        where = self.storage.locate(key)
        if where is None:
            raise NotFound(f"{key} is not in any tier")
        return where

    def _load(self, entry: ModelEntry, source: CacheTier, g: ShareGranularity,
              now: Optional[float]) -> PlacementResult:
        key = entry.key
        timings = _zero_timings()
        staged = None
        manifest = entry.manifest
        if source is CacheTier.REMOTE:
            t0 = time.perf_counter()
            manifest, staged = self.storage.fetch(key)
            timings["fetch"] = time.perf_counter() - t0
        elif manifest is None:
            manifest = self.storage.describe(key)

        evicted: list = []
        host_admitted = False
        try:
            with self._cond:
                if entry.manifest is None:
                    entry.manifest = manifest
                    entry.weights_bytes = estimate_footprint(manifest).weights_bytes
                w = entry.weights_bytes
                if staged is not None and self._admit_disk(entry, staged, evicted):
                    staged = None
                fast = self.budgets[CacheTier.FAST]
                if w > fast.capacity_bytes:
                    raise TooLargeForFast(f"{key}: {w} bytes > fast capacity {fast.capacity_bytes}")
                victims = self._plan(CacheTier.FAST, w, exclude=entry)
                if victims is None:
                    raise NoEvictableSpace(f"{key}: cannot free {w} bytes in the fast tier")
                self._evict(CacheTier.FAST, victims, evicted)
                fast.used_bytes += w
                if source is not CacheTier.HOST:
                    host_admitted = self._reserve_host(entry, evicted)
                host_blob = entry.host_copy if source is CacheTier.HOST else None
        except MRMError as exc:
            exc.evicted = tuple(evicted)
            if staged is not None:
                self.storage.discard(key, staged)
                staged = None
            raise
        try:
            if host_blob is None:
                t0 = time.perf_counter()
                host_blob = self.storage.read(key, manifest, staged)
                timings["disk_read"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            segments = self.storage.publish(key, manifest, host_blob)
            timings["host_to_fast_copy"] = time.perf_counter() - t0
        except BaseException:
            with self._cond:
                fast.used_bytes -= w
                if host_admitted:
                    self.budgets[CacheTier.HOST].used_bytes -= w
            raise
        finally:
            if staged is not None:
                self.storage.discard(key, staged)

        with self._cond:
            entry.residency.add(CacheTier.FAST)
            entry.fast_segments = list(segments)
            if host_admitted:
                entry.residency.add(CacheTier.HOST)
                entry.host_copy = host_blob
            return self._grant(entry, _OUTCOME_FOR_SOURCE[source], g, now, evicted, timings)

    def _grant(self, entry: ModelEntry, outcome: Outcome, g: ShareGranularity,
               now: Optional[float], evicted: list, timings: dict) -> PlacementResult:
        # Caller holds the lock.
        t0 = time.perf_counter()
        entry.refcount += 1
        entry.use_count += 1
        entry.last_access = self.clock() if now is None else now
        self._count(outcome)
        self._reserve_workspace(entry, evicted)
        layout = layout_for(entry.manifest, g)
        result = PlacementResult(
            outcome=outcome,
            model_id=entry.model_id,
            segments=tuple(entry.fast_segments),
            layout=layout,
            footprint=FootprintEstimate(entry.weights_bytes, entry.manifest.workspace_bytes,
                                        entry.weights_bytes + entry.manifest.workspace_bytes),
            timings=timings,
            evicted=tuple(evicted),
            manifest=entry.manifest,
        )
        timings["handle_export"] = time.perf_counter() - t0
        return result

    def _count(self, outcome: Outcome) -> None:
        s = self._tier_stats
        if outcome is Outcome.FAST_HIT:
            s[CacheTier.FAST]["hits"] += 1
            return
        s[CacheTier.FAST]["misses"] += 1
        if outcome is Outcome.HOST_HIT:
            s[CacheTier.HOST]["hits"] += 1
            return
        s[CacheTier.HOST]["misses"] += 1
        if outcome is Outcome.DISK_LOAD:
            s[CacheTier.LOCAL_DISK]["hits"] += 1
            return
        s[CacheTier.LOCAL_DISK]["misses"] += 1
        s[CacheTier.REMOTE]["hits"] += 1

    def close(self, key: ModelKey) -> int:
        return self.close_collect(key)[0]

    def close_collect(self, key: ModelKey) -> tuple[int, tuple]:
        """Like :meth:`close` but also reports what an eager release evicted."""
        with self._cond:
            entry = self._entries.get(key)
            if entry is None:
                raise UnknownModel(f"{key} was never opened")
            if entry.refcount == 0:
                raise NotOpen(f"{key} has no open handles")
            entry.refcount -= 1
            evicted: list = []
            if entry.refcount == 0 and self.config.eager_reclaim and CacheTier.FAST in entry.residency:
                self._evict(CacheTier.FAST, [entry], evicted)
            return entry.refcount, tuple(evicted)

    # -- reclamation --------------------------------------------------------

    def _resident(self, tier: CacheTier, exclude: Optional[ModelEntry]) -> list[ModelEntry]:
        return [e for e in self._entries.values()
                if tier in e.residency and e is not exclude and not e.loading]

    def _plan(self, tier: CacheTier, needed: int, exclude: Optional[ModelEntry] = None,
              policy: Optional[EvictionPolicy] = None) -> Optional[list[ModelEntry]]:
        """Greedy victim list covering ``needed`` bytes, or None if impossible."""
        free = self.budgets[tier].free_bytes
        if free >= needed:
            return []
        victims = []
        for e in evict_candidates(policy or self.config.policy, self._resident(tier, exclude)):
            victims.append(e)
            free += e.weights_bytes
            if free >= needed:
                return victims
        return None

    def _evict(self, tier: CacheTier, victims: list[ModelEntry], evicted: list) -> None:
        budget = self.budgets[tier]
        for e in victims:
            if tier is CacheTier.FAST:
                if e.refcount != 0:
                    raise AssertionError(f"refusing to evict pinned {e.key} (refcount {e.refcount})")
                segments, e.fast_segments = e.fast_segments, None
                self.storage.drop_fast(e.key, segments or [])
            elif tier is CacheTier.HOST:
                e.host_copy = None
            else:
                self.storage.drop_disk(e.key)
                e.disk_path = None
            e.residency.discard(tier)
            budget.used_bytes -= e.weights_bytes
            self._tier_stats[tier]["evictions"] += 1
            evicted.append((tier, e.key))

    def reclaim(self, tier: CacheTier, bytes_needed: int,
                policy: Optional[EvictionPolicy] = None) -> list[ModelKey]:
        with self._cond:
            victims = self._plan(tier, bytes_needed, policy=policy)
            if victims is None:
                raise NoEvictableSpace(f"cannot free {bytes_needed} bytes in {tier.name}")
            evicted: list = []
            self._evict(tier, victims, evicted)
            return [k for _, k in evicted]

    def _reserve_host(self, entry: ModelEntry, evicted: list) -> bool:
        w = entry.weights_bytes
        host = self.budgets[CacheTier.HOST]
        if w > host.capacity_bytes:
            return False
        victims = self._plan(CacheTier.HOST, w, exclude=entry)
        if victims is None:
            return False
        self._evict(CacheTier.HOST, victims, evicted)
        host.used_bytes += w
        return True

    def _admit_disk(self, entry: ModelEntry, staged: Any, evicted: list) -> bool:
        w = entry.weights_bytes
        disk = self.budgets[CacheTier.LOCAL_DISK]
        if w > disk.capacity_bytes:
            return False
        victims = self._plan(CacheTier.LOCAL_DISK, w, exclude=entry)
        if victims is None:
            return False
        self._evict(CacheTier.LOCAL_DISK, victims, evicted)
        entry.disk_path = self.storage.admit(entry.key, staged)
        entry.residency.add(CacheTier.LOCAL_DISK)
        disk.used_bytes += w
        return True

    def _reserve_workspace(self, entry: ModelEntry, evicted: list) -> None:
        # Intermediates are allocated by the client, not here; make room for
        # them best-effort, capped by the configured headroom.
        fast = self.budgets[CacheTier.FAST]
        cap = int(self.config.workspace_headroom_fraction * fast.capacity_bytes)
        reserve = min(entry.manifest.workspace_bytes, cap)
        if fast.free_bytes >= reserve:
            return
        victims = []
        free = fast.free_bytes
        for e in evict_candidates(self.config.policy, self._resident(CacheTier.FAST, entry)):
            victims.append(e)
            free += e.weights_bytes
            if free >= reserve:
                break
        self._evict(CacheTier.FAST, victims, evicted)

    def drop_all(self) -> None:
        """Release every fast segment regardless of reference counts (shutdown only)."""
        with self._cond:
            for e in self._entries.values():
                if e.fast_segments:
                    self.storage.drop_fast(e.key, e.fast_segments)
                e.fast_segments = None
                e.host_copy = None
                e.residency.discard(CacheTier.FAST)
                e.residency.discard(CacheTier.HOST)
            self.budgets[CacheTier.FAST].used_bytes = 0
            self.budgets[CacheTier.HOST].used_bytes = 0


def _zero_timings() -> dict:
    return dict.fromkeys(PHASES, 0.0)


def trace_event_outcome(result: PlacementResult) -> tuple[str, tuple]:
    return result.outcome.value, tuple((t.name, k) for t, k in result.evicted)


class MemoryStorage:
    """Byte-free storage for exercising placement logic: sizes only, I/O counted.

    ``catalog`` maps keys to ``(weights_bytes, workspace_bytes, on_disk)``.
    """

    def __init__(self, catalog: dict):
        from .format import DType

        self.manifests = {}
        self.on_disk = {}
        for key, (weights, workspace, on_disk) in catalog.items():
            tensors = [("w", (weights,), DType.I8)] if weights else []
            self.manifests[key] = ModelManifest.build(key, tensors, workspace)
            self.on_disk[key] = on_disk
        self.fetched: set = set()
        self.counters = {"describe": 0, "fetch": 0, "read": 0, "publish": 0,
                         "drop_fast": 0, "drop_disk": 0}
        self.on_drop_fast = None

    def locate(self, key):
        if key not in self.manifests:
            return None
        if self.on_disk[key] or key in self.fetched:
            return CacheTier.LOCAL_DISK
        return CacheTier.REMOTE

    def describe(self, key):
        self.counters["describe"] += 1
        return self.manifests[key]

    def fetch(self, key):
        self.counters["fetch"] += 1
        return self.manifests[key], key

    def admit(self, key, staged):
        self.fetched.add(key)
        return None

    def discard(self, key, staged):
        pass

    def read(self, key, manifest, staged=None):
        self.counters["read"] += 1
        return None

    def publish(self, key, manifest, blob):
        self.counters["publish"] += 1
        return []

    def drop_fast(self, key, segments):
        self.counters["drop_fast"] += 1
        if self.on_drop_fast is not None:
            self.on_drop_fast(key)

    def drop_disk(self, key):
        self.counters["drop_disk"] += 1
        self.fetched.discard(key)
