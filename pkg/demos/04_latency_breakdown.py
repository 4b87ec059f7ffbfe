"""Cold, warm and daemon-less opens of a few tiny-catalog models, phase by phase.

    python3 demos/04_latency_breakdown.py
"""

import os
import shutil
import tempfile

from mrm.bench.catalog import TINY, make_model
from mrm.bench.live import bench_config, run_latency

work = tempfile.mkdtemp(prefix="mrm-lat-")
models = os.path.join(work, "models")
os.makedirs(models)
picked = [e for e in TINY.entries if e.name in ("SqueezeNet-v1.1", "ResNet50", "AlexNet", "VGG19")]
keys = []
for e in picked:
    make_model(models, TINY.key(e), TINY.weights_bytes(e), TINY.workspace_bytes(e), e.layers, seed=1)
    keys.append(TINY.key(e))

cfg = bench_config(work, models, fast=64 * 10**6, host=128 * 10**6)
rows = []
for mode in ("cold", "warm", "nodaemon"):
    rows += run_latency(keys, models, mode, cfg, reps=3)

print(f"{'model':20s} {'mode':9s} {'outcome':9s} {'disk':>8s} {'copy':>8s} {'share':>8s} "
      f"{'compute':>8s} {'total':>8s}   (ms, median of 3)")
by = {}
for t in rows:
    by.setdefault((t.key.name, t.mode), []).append(t)
for (name, mode), ts in by.items():
    ts.sort(key=lambda t: t.end_to_end)
    t = ts[len(ts) // 2]
    ms = [1e3 * v for v in (t.load_disk, t.init_copy, t.share_overhead, t.compute, t.end_to_end)]
    print(f"{name:20s} {mode:9s} {t.outcome:9s} " + " ".join(f"{v:8.2f}" for v in ms))

shutil.rmtree(work, ignore_errors=True)
