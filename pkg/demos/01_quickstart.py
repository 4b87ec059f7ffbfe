"""Start a daemon, share one model between two clients, and compare with a private load.

    python3 demos/01_quickstart.py
"""

import os
import shutil
import tempfile

from mrm.bench.catalog import make_model
from mrm.client import Client, touch
from mrm.daemon import Daemon, DaemonConfig
from mrm.format import ModelKey

work = tempfile.mkdtemp(prefix="mrm-demo-")
models = os.path.join(work, "models")
os.makedirs(models)

# A synthetic 8 MB artifact with 16 tensors of seeded noise.
key = ModelKey("demo", "resnet", "1.0")
path = make_model(models, key, weights_bytes=8_000_000, workspace_bytes=2_000_000, layers=16, seed=7)
print(f"artifact: {path} ({os.path.getsize(path):,} bytes)")

config = DaemonConfig.from_dict({
    "listen_path": os.path.join(work, "mrm.sock"),
    "disk_cache_dir": models,
    "fast_capacity_bytes": "64MB",
    "host_capacity_bytes": "128MB",
    "disk_capacity_bytes": "1GB",
})

with Daemon(config) as daemon:
    alice = Client(config.listen_path, model_dir=models)
    bob = Client(config.listen_path, model_dir=models)

    a = alice.open(key)
    b = bob.open(key)
    print(f"alice: {a.outcome:9s} shared={a.shared}")
    print(f"bob:   {b.outcome:9s} shared={b.shared}")

    # Same bytes, one resident copy.
    private = alice.open(key, force_private=True)
    print(f"checksums: shared={touch(a):#010x} private={touch(private):#010x}")

    stats = alice.stats()
    fast = stats.tier("FAST")
    print(f"fast tier: {fast.used_bytes:,} of {fast.capacity_bytes:,} bytes used, "
          f"{fast.hits} hit(s), {fast.misses} miss(es); disk reads: {stats.disk_reads}")

    for client, view in ((alice, a), (bob, b), (alice, private)):
        client.close(view)
    print(f"refcount after closing: {daemon.cache.refcount(key)}")
    # The model stays resident after the last close.
    again = bob.open(key)
    print(f"reopen:   {again.outcome}")
    bob.close(again)
    alice.close_connections()
    bob.close_connections()

shutil.rmtree(work, ignore_errors=True)
