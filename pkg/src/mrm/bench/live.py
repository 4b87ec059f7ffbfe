"""Live measurements against a real ``mrmd`` subprocess.

``run_latency`` gives per-model phase breakdowns for cold, warm and
daemon-less opens. ``run_grid`` sweeps (active fraction, concurrency) cells,
each with a fresh daemon and ``concurrency`` forked worker processes that
issue Pareto-sampled open, touch, close requests.
"""

from __future__ import annotations

import contextlib
import json
import multiprocessing
import os
import random
import shutil
import signal
import subprocess
import sys
import tempfile
import time
import zlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from ..client import Client, drop_page_cache, touch
from ..daemon import DaemonConfig
from ..errors import DaemonUnreachable, MRMError
from ..format import ModelKey
from .sim import active_models
from .stats import geomean, pareto_rank, percentile, uniform_open

PHASES = ("load_disk", "init_copy", "share_overhead", "compute")
GRID_HEADER = ("active_fraction", "concurrency", "geomean_p95_speedup", "mean_latency_penalty",
               "fast_hit_rate", "host_hit_rate", "disk_load_rate", "private_rate",
               "evictions", "requests", "status")


# -- daemon subprocess --------------------------------------------------------

class DaemonProcess:
    """``mrmd`` in a child process, configured through a temporary JSON file."""

    def __init__(self, config: DaemonConfig, workdir: str):
        self.config = config
        self.workdir = workdir
        self.proc: Optional[subprocess.Popen] = None

    @property
    def endpoint(self) -> str:
        return self.config.listen_path

    def start(self, timeout: float = 20.0) -> "DaemonProcess":
        path = os.path.join(self.workdir, f"mrmd-{os.getpid()}-{time.monotonic_ns()}.json")
        with open(path, "w") as f:
            json.dump(self.config.to_dict(), f)
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "mrm.daemon", "--config", path, "--log-level", "WARNING"],
            stdin=subprocess.DEVNULL,
        )
        deadline = time.monotonic() + timeout
        while True:
            if self.proc.poll() is not None:
                raise DaemonUnreachable(f"mrmd exited with status {self.proc.returncode}")
            try:
                with Client(self.endpoint) as c:
                    c.stats()
                return self
            except (DaemonUnreachable, MRMError, OSError):
                if time.monotonic() > deadline:
                    self.stop()
                    raise DaemonUnreachable(f"mrmd did not come up on {self.endpoint}")
                time.sleep(0.02)

    def stop(self, timeout: float = 20.0) -> int:
        if self.proc is None:
            return 0
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        rc, self.proc = self.proc.returncode, None
        return rc

    def __enter__(self) -> "DaemonProcess":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def bench_config(workdir: str, model_dir: str, fast: int, host: int, disk: Optional[int] = None,
                 policy: str = "lru", shm_dir: Optional[str] = None, **extra) -> DaemonConfig:
    return DaemonConfig.from_dict(dict(
        listen_path=os.path.join(workdir, "mrmd.sock"),
        disk_cache_dir=model_dir,
        fast_capacity_bytes=fast,
        host_capacity_bytes=host,
        disk_capacity_bytes=disk or max(fast, host) * 4,
        eviction_policy=policy,
        shutdown_grace_s=0.0,
        shm_dir=shm_dir,
        **extra,
    ))


# -- latency breakdown --------------------------------------------------------

@dataclass
class PhaseTiming:
    key: ModelKey
    mode: str
    outcome: str
    load_disk: float
    init_copy: float
    share_overhead: float
    compute: float
    end_to_end: float

    @property
    def phase_sum(self) -> float:
        return self.load_disk + self.init_copy + self.share_overhead + self.compute

    def row(self) -> dict:
        return {"model": str(self.key), "mode": self.mode, "outcome": self.outcome,
                **{p: getattr(self, p) for p in PHASES}, "end_to_end": self.end_to_end}


def timed_request(client: Client, key: ModelKey, private: bool = False) -> PhaseTiming:
    """One open, touch, close cycle with its phase breakdown.

    Whatever the client spends outside disk reads, initial copies and
    compute (round trips, attach, close) is charged to ``share_overhead``
    on the shared path, so the phases account for the whole request.
    """
    t0 = time.perf_counter()
    view = client.open(key, force_private=private)
    t1 = time.perf_counter()
    touch(view)
    t2 = time.perf_counter()
    client.close(view)
    t3 = time.perf_counter()
    tm = view.timings
    load, copy = tm["load_disk"] + tm.get("fetch", 0.0), tm["init_copy"]
    if view.shared:
        share = (t1 - t0) - load - copy + (t3 - t2)
        compute = t2 - t1
    else:
        # Private: view assembly and release are part of the load path.
        share = 0.0
        compute = (t2 - t1)
        copy += max(0.0, (t1 - t0) - load - copy) + (t3 - t2)
    return PhaseTiming(key, "", view.outcome, load, copy, max(share, 0.0), compute, t3 - t0)


def run_latency(keys: Sequence[ModelKey], model_dir: str, mode: str, config: Optional[DaemonConfig] = None,
                reps: int = 5, drop_cache: bool = False, shm_dir: Optional[str] = None) -> list[PhaseTiming]:
    """Per-model phase timings for ``mode`` in {cold, warm, nodaemon}.

    cold restarts the daemon before every sample so each is a first open;
    warm primes the model once and then measures FastHit reopens; nodaemon
    loads privately. ``drop_cache`` asks the kernel to evict the artifact's
    page cache before disk-bound samples.
    """
    if mode not in ("cold", "warm", "nodaemon"):
        raise ValueError(f"unknown latency mode {mode!r}")
    out: list[PhaseTiming] = []

    def maybe_drop(key):
        if drop_cache:
            with open(os.path.join(model_dir, key.filename), "rb") as f:
                drop_page_cache(f.fileno())

    if mode == "nodaemon":
        client = Client(endpoint="/nonexistent/mrm.sock", model_dir=model_dir)
        for key in keys:
            for _ in range(reps):
                maybe_drop(key)
                t = timed_request(client, key, private=True)
                t.mode = mode
                out.append(t)
        return out

    if config is None:
        raise ValueError("cold and warm modes need a daemon config")
    workdir = os.path.dirname(config.listen_path)
    if mode == "cold":
        for key in keys:
            for _ in range(reps):
                maybe_drop(key)
                with DaemonProcess(config, workdir):
                    with Client(config.listen_path, model_dir=model_dir, shm_dir=shm_dir) as c:
                        t = timed_request(c, key)
                t.mode = mode
                out.append(t)
        return out

    with DaemonProcess(config, workdir):
        with Client(config.listen_path, model_dir=model_dir, shm_dir=shm_dir) as c:
            for key in keys:
                timed_request(c, key)
                for _ in range(reps):
                    t = timed_request(c, key)
                    t.mode = mode
                    out.append(t)
    return out


# -- oversubscription grid ----------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    keys: tuple[ModelKey, ...]
    model_dir: str
    fast_capacity: int
    host_capacity: int
    fractions: tuple[float, ...]
    concurrencies: tuple[int, ...]
    requests_per_client: int = 200
    warmup: int = 10
    alpha: float = 1.0
    x_m: float = 1.0
    seed: int = 0
    policy: str = "lru"
    baseline_reps: int = 5
    shm_dir: Optional[str] = None


def _worker(args) -> list[tuple]:
    endpoint, model_dir, shm_dir, keys, alpha, x_m, seed, n, warmup = args
    rng = random.Random(seed)
    keys = [ModelKey(*k) for k in keys]
    out = []
    with Client(endpoint, model_dir=model_dir, shm_dir=shm_dir) as client:
        for i in range(warmup + n):
            key = keys[pareto_rank(uniform_open(rng), alpha, x_m, len(keys)) - 1]
            t = timed_request(client, key)
            if i >= warmup:
                out.append((tuple((key.namespace, key.name, key.version)), t.outcome, t.end_to_end))
    return out


def measure_baselines(spec: GridSpec, workdir: str) -> tuple[dict, dict]:
    """Per-model p95 private latency and median warm latency, both at concurrency 1."""
    private = {}
    client = Client(endpoint="/nonexistent/mrm.sock", model_dir=spec.model_dir)
    for key in spec.keys:
        private[key] = percentile([timed_request(client, key, private=True).end_to_end
                                   for _ in range(spec.baseline_reps)], 95)
    cfg = bench_config(workdir, spec.model_dir, spec.fast_capacity, spec.host_capacity,
                       policy=spec.policy, shm_dir=spec.shm_dir)
    warm = {}
    with DaemonProcess(cfg, workdir), Client(cfg.listen_path, model_dir=spec.model_dir,
                                             shm_dir=spec.shm_dir) as c:
        for key in spec.keys:
            timed_request(c, key)
            warm[key] = percentile([timed_request(c, key).end_to_end
                                    for _ in range(spec.baseline_reps)], 50)
    return private, warm


def run_cell(spec: GridSpec, fraction: float, concurrency: int, workdir: str,
             private: dict, warm: dict) -> dict:
    active = active_models(spec.keys, fraction, spec.seed)
    cfg = bench_config(workdir, spec.model_dir, spec.fast_capacity, spec.host_capacity,
                       policy=spec.policy, shm_dir=spec.shm_dir)
    row = {"active_fraction": fraction, "concurrency": concurrency}
    cell_seed = zlib.crc32(f"{spec.seed}:{fraction}:{concurrency}".encode())
    jobs = [(cfg.listen_path, spec.model_dir, spec.shm_dir,
             [(k.namespace, k.name, k.version) for k in active],
             spec.alpha, spec.x_m, cell_seed + w, spec.requests_per_client, spec.warmup)
            for w in range(concurrency)]
    try:
        with DaemonProcess(cfg, workdir) as d:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(concurrency) as pool:
                results = pool.map(_worker, jobs, chunksize=1)
            with Client(d.endpoint) as c:
                evictions = c.stats().tier("FAST").evictions
    except Exception as exc:  # a failed cell becomes a marker row, the sweep goes on
        return {**row, **{h: "" for h in GRID_HEADER[2:-1]},
                "status": f"error: {type(exc).__name__}: {exc}"}
    records = [(ModelKey(*k), outcome, lat) for res in results for k, outcome, lat in res]
    by_model: dict = {}
    for key, _, lat in records:
        by_model.setdefault(key, []).append(lat)
    speedups = [private[k] / percentile(v, 95) for k, v in by_model.items()]
    n = len(records)
    count = lambda o: sum(1 for _, out, _ in records if out == o) / n  # noqa: E731
    return {
        **row,
        "geomean_p95_speedup": geomean(speedups),
        "mean_latency_penalty": sum(lat / warm[k] - 1.0 for k, _, lat in records) / n,
        "fast_hit_rate": count("FastHit"),
        "host_hit_rate": count("HostHit"),
        "disk_load_rate": count("DiskLoad") + count("RemoteFetch"),
        "private_rate": count("Private"),
        "evictions": evictions,
        "requests": n,
        "status": "ok",
    }


def run_grid(spec: GridSpec, workdir: Optional[str] = None, progress=None) -> list[dict]:
    """One row per (fraction, concurrency) cell, in sweep order."""
    with contextlib.ExitStack() as stack:
        if workdir is None:
            workdir = tempfile.mkdtemp(prefix="mrm-grid-")
            stack.callback(shutil.rmtree, workdir, True)
        private, warm = measure_baselines(spec, workdir)
        rows = []
        for f in spec.fractions:
            for c in spec.concurrencies:
                row = run_cell(spec, f, c, workdir, private, warm)
                rows.append(row)
                if progress is not None:
                    progress(row)
        return rows


def grid_matrix(rows: Iterable[dict], value: str = "geomean_p95_speedup") -> str:
    """gnuplot ``splot`` data: ``fraction concurrency value`` with a blank line between fractions."""
    lines, last = [], None
    for r in rows:
        if last is not None and r["active_fraction"] != last:
            lines.append("")
        last = r["active_fraction"]
        v = r[value]
        lines.append(f"{r['active_fraction']} {r['concurrency']} {v if v != '' else 'NaN'}")
    return "\n".join(lines) + "\n"
