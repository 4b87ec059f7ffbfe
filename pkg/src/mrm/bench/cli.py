"""``mrm-bench``: catalog generation, latency breakdowns, grids, simulation, oracle check."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import time
from typing import Iterable, Optional

from .. import __version__
from ..format import ModelKey
from . import catalog as cat
from .live import GRID_HEADER, GridSpec, bench_config, grid_matrix, run_grid, run_latency
from .oracle import oracle_check
from .sim import SimConfig, SimModel, SimWorkload, TierLatencies, simulate

LATENCY_HEADER = ("model", "mode", "outcome", "load_disk", "init_copy", "share_overhead",
                  "compute", "end_to_end")
DEFAULT_FRACTIONS = "0.1,0.2,0.25,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x)


def _ints(text: str) -> tuple[int, ...]:
    if "-" in text and "," not in text:
        lo, hi = (int(x) for x in text.split("-"))
        return tuple(range(lo, hi + 1))
    return tuple(int(x) for x in text.split(",") if x)


def _size(text: str) -> int:
    from ..daemon import parse_size
    return parse_size(text)


def emit(rows: Iterable[dict], header: tuple, fmt: str, out) -> None:
    if fmt == "jsonl":
        for r in rows:
            out.write(json.dumps({h: r.get(h, "") for h in header}) + "\n")
        return
    w = csv.DictWriter(out, fieldnames=list(header), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({h: (f"{v:.6g}" if isinstance(v, float) else v) for h, v in r.items()})


def _keys(spec: cat.CatalogSpec, only: Optional[str]) -> list[ModelKey]:
    keys = spec.keys()
    if only:
        # Accept either the table name ("SqueezeNet-v1.1") or the key slug.
        wanted = {w.lower() for w in only.split(",")}
        keys = [spec.key(e) for e in spec.entries
                if e.name.lower() in wanted or spec.key(e).name.lower() in wanted]
        if not keys:
            raise SystemExit(f"mrm-bench: no models named {only!r} in {spec.name}")
    return keys


def cmd_gen(a) -> int:
    spec = cat.get_catalog(a.catalog)
    t0 = time.perf_counter()
    paths = cat.gen_catalog(spec, a.dir, a.seed)
    size = sum(os.path.getsize(p) for p in paths)
    print(f"wrote {len(paths)} artifacts, {size} bytes, to {a.dir} in {time.perf_counter() - t0:.1f}s",
          file=sys.stderr)
    return 0


def _capacities(a, spec: cat.CatalogSpec) -> tuple[int, int]:
    total = spec.total_weights()
    fast = _size(a.fast_capacity) if a.fast_capacity else total // 2
    host = _size(a.host_capacity) if a.host_capacity else total
    return fast, host


def cmd_latency(a) -> int:
    spec = cat.get_catalog(a.catalog)
    keys = _keys(spec, a.models)
    fast, host = _capacities(a, spec)
    rows = []
    with tempfile.TemporaryDirectory(prefix="mrm-lat-") as work:
        cfg = bench_config(work, a.dir, max(fast, _largest(spec)), host, policy=a.policy)
        for mode in a.modes.split(","):
            for t in run_latency(keys, a.dir, mode, cfg, reps=a.reps, drop_cache=a.drop_cache):
                rows.append(t.row())
    emit(rows, LATENCY_HEADER, a.out, sys.stdout)
    return 0


def _largest(spec: cat.CatalogSpec) -> int:
    return max(spec.weights_bytes(e) + spec.workspace_bytes(e) for e in spec.entries)


def cmd_grid(a) -> int:
    spec = cat.get_catalog(a.catalog)
    fast, host = _capacities(a, spec)
    grid = GridSpec(
        keys=tuple(spec.keys()), model_dir=a.dir, fast_capacity=fast, host_capacity=host,
        fractions=_floats(a.fractions), concurrencies=_ints(a.concurrency),
        requests_per_client=a.requests, warmup=a.warmup, alpha=a.alpha, x_m=a.x_m,
        seed=a.seed, policy=a.policy,
    )
    t0 = time.perf_counter()

    def progress(row):
        print(f"[{time.perf_counter() - t0:7.1f}s] fraction={row['active_fraction']} "
              f"concurrency={row['concurrency']} {row['status']}", file=sys.stderr)

    rows = run_grid(grid, progress=progress)
    emit(rows, GRID_HEADER, a.out, sys.stdout)
    if a.matrix:
        with open(a.matrix, "w") as f:
            f.write(grid_matrix(rows))
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_simulate(a) -> int:
    spec = cat.get_catalog(a.catalog)
    fast, host = _capacities(a, spec)
    models = {spec.key(e): SimModel(spec.weights_bytes(e), spec.workspace_bytes(e), True)
              for e in spec.entries}
    config = SimConfig(fast, host, host * 4, a.policy)
    lat = TierLatencies(q=a.q, o=a.o, s=a.s)
    rows = []
    for f in _floats(a.fractions):
        for c in _ints(a.concurrency):
            res = simulate(SimWorkload(tuple(models), models, config, f, c, a.requests, a.warmup,
                                       a.alpha, a.x_m, a.seed), lat)
            n = len(res["records"])
            rows.append({
                "active_fraction": f, "concurrency": c,
                "geomean_p95_speedup": res["geomean_p95_speedup"],
                "mean_latency_penalty": res["mean_latency_penalty"],
                "fast_hit_rate": res["fast_hit_rate"],
                "host_hit_rate": sum(r["outcome"] == "HostHit" for r in res["records"]) / n,
                "disk_load_rate": sum(r["outcome"] in ("DiskLoad", "RemoteFetch") for r in res["records"]) / n,
                "private_rate": sum(r["outcome"] not in ("FastHit", "HostHit", "DiskLoad", "RemoteFetch")
                                    for r in res["records"]) / n,
                "evictions": res["evictions"], "requests": n, "status": "ok",
            })
    emit(rows, GRID_HEADER, a.out, sys.stdout)
    if a.matrix:
        with open(a.matrix, "w") as f:
            f.write(grid_matrix(rows))
    return 0


def cmd_oracle(a) -> int:
    t0 = time.perf_counter()
    rep = oracle_check(a.traces, a.seed)
    dt = time.perf_counter() - t0
    print(f"traces={rep.traces} ops={rep.ops} evictions={rep.evictions} "
          f"divergences={len(rep.divergences)} pinned_violations={rep.pinned_violations} "
          f"budget_violations={rep.budget_violations} refcount_violations={rep.refcount_violations} "
          f"seconds={dt:.1f}")
    for d in rep.divergences[:5]:
        print(f"  trace {d[0]} step {d[1]}: {d[2]} {d[3]} got {d[4]} expected {d[5]}")
    return 0 if rep.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrm-bench", description=__doc__)
    p.add_argument("--version", action="version", version=f"mrm-bench {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workload=True):
        sp.add_argument("--catalog", default="tiny", choices=sorted(cat.CATALOGS))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--policy", default="lru", choices=["lru", "lcu"])
        sp.add_argument("--out", default="csv", choices=["csv", "jsonl"])
        sp.add_argument("--fast-capacity", help="default: half the catalog's total weights")
        sp.add_argument("--host-capacity", help="default: the catalog's total weights")
        if workload:
            sp.add_argument("--fractions", default=DEFAULT_FRACTIONS)
            sp.add_argument("--concurrency", default="1-10", help="e.g. 1-10 or 1,2,4")
            sp.add_argument("--requests", type=int, default=200, help="measured requests per client")
            sp.add_argument("--warmup", type=int, default=10, help="unmeasured requests per client")
            sp.add_argument("--alpha", type=float, default=1.0)
            sp.add_argument("--x-m", dest="x_m", type=float, default=1.0)
            sp.add_argument("--matrix", help="also write a gnuplot splot data file")

    g = sub.add_parser("gen", help="write a synthetic catalog")
    g.add_argument("--catalog", default="tiny", choices=sorted(cat.CATALOGS))
    g.add_argument("--dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    lt = sub.add_parser("latency", help="cold/warm/nodaemon phase breakdowns")
    common(lt, workload=False)
    lt.add_argument("--dir", required=True, help="directory holding the generated catalog")
    lt.add_argument("--modes", default="cold,warm,nodaemon")
    lt.add_argument("--models", help="comma-separated model names (default: all)")
    lt.add_argument("--reps", type=int, default=3)
    lt.add_argument("--drop-cache", action="store_true", help="fadvise away page cache before disk loads")
    lt.set_defaults(func=cmd_latency)

    gr = sub.add_parser("grid", help="live oversubscription sweep")
    common(gr)
    gr.add_argument("--dir", required=True)
    gr.set_defaults(func=cmd_grid)

    sm = sub.add_parser("simulate", help="modeled oversubscription sweep")
    common(sm)
    sm.add_argument("--q", type=float, default=TierLatencies.q, help="disk bandwidth, bytes/s")
    sm.add_argument("--o", type=float, default=TierLatencies.o)
    sm.add_argument("--s", type=float, default=TierLatencies.s)
    sm.set_defaults(func=cmd_simulate)

    oc = sub.add_parser("oracle-check", help="differential test of the cache against the reference model")
    oc.add_argument("--traces", type=int, default=1000)
    oc.add_argument("--seed", type=int, default=0)
    oc.set_defaults(func=cmd_oracle)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    a = build_parser().parse_args(argv)
    return a.func(a)


if __name__ == "__main__":
    sys.exit(main())
