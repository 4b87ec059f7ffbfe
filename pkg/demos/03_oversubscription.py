"""Sweep the modeled oversubscription grid and draw it as a text heat map.

The catalog holds twice what the fast tier can, requests follow a Pareto
popularity curve over the active models, and every cell reports the
geometric mean of per-model p95 speedups over a private load.

    python3 demos/03_oversubscription.py
"""

from mrm.bench.catalog import TINY
from mrm.bench.sim import SimConfig, SimModel, SimWorkload, TierLatencies, simulate

models = {TINY.key(e): SimModel(TINY.weights_bytes(e), TINY.workspace_bytes(e)) for e in TINY.entries}
total = TINY.total_weights()
config = SimConfig(fast_capacity=total // 2, host_capacity=total, disk_capacity=4 * total)
lat = TierLatencies(q=193.3e6 / 64)  # disk slowed by the catalog's scale factor

fractions = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
concurrency = range(1, 11)
print("geomean p95 speedup; rows = active fraction, columns = concurrency\n")
print("frac " + "".join(f"{c:>8d}" for c in concurrency))
for f in fractions:
    cells = []
    for c in concurrency:
        r = simulate(SimWorkload(tuple(models), models, config, f, c, total_requests=2000, warmup=0), lat)
        cells.append(r["geomean_p95_speedup"])
    print(f"{f:4.1f} " + "".join(f"{x:8.2f}" for x in cells))
