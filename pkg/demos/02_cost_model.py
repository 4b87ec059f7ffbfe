"""When does sharing pay off?  Evaluate the share benefit over the small catalog.

rho = b/q - n(o + s): positive means attaching a shared copy beats reading
the weights from disk. Layer granularity multiplies n by the tensor count,
so small many-layer models flip to a private load first.

    python3 demos/02_cost_model.py
"""

from mrm.bench.catalog import SMALL37
from mrm.client import CostModelParams, share_benefit

# A fast NVMe disk and 1 ms round trip per shared object.
params = CostModelParams(q=521.32e6, o=0.0005, s=0.0005)
print(f"q={params.q / 1e6:.0f} MB/s, o+s={1e3 * (params.o + params.s):.1f} ms per object\n")
print(f"{'model':24s} {'MB':>6s} {'layers':>6s} {'rho(model)':>11s} {'rho(layer)':>11s}  decision")

for e in sorted(SMALL37.entries, key=lambda e: e.weights_mb):
    b = e.weights_mb * 1e6
    whole = share_benefit(b, 1, params)
    layered = share_benefit(b, e.layers, params)
    if layered > 0:
        decision = "share per layer"
    elif whole > 0:
        decision = "share whole model"
    else:
        decision = "load privately"
    print(f"{e.name:24s} {e.weights_mb:6.1f} {e.layers:6d} {whole:+10.3f}s {layered:+10.3f}s  {decision}")
