"""Small statistics helpers used by the benchmark: Pareto ranks, p95, geomean."""

from __future__ import annotations

import math
from typing import Iterable, Sequence


class EmptySamples(ValueError):
    pass


class NonPositiveInput(ValueError):
    pass


def pareto_rank(u: float, alpha: float = 1.0, x_m: float = 1.0, n: int = 1) -> int:
    """Map a uniform draw on (0, 1) to a model rank in 1..n.

    Inverse-CDF sample ``x_m / u**(1/alpha)``, floored and clipped to ``n``.
    With alpha = x_m = 1, rank k has probability 1/k - 1/(k+1).
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    x = x_m / u ** (1.0 / alpha)
    return max(1, min(int(math.floor(x)), n))


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile."""
    if not len(samples):
        raise EmptySamples("percentile of no samples")
    if not 0 < p <= 100:
        raise ValueError(f"p must be in (0, 100], got {p}")
    ordered = sorted(samples)
    rank = math.ceil(round(p * len(ordered) / 100.0, 9))
    return ordered[max(rank, 1) - 1]


def uniform_open(rng) -> float:
    """A draw from the open interval (0, 1) using ``rng.random()``."""
    while True:
        u = rng.random()
        if u > 0.0:
            return u


def geomean(xs: Iterable[float]) -> float:
    xs = list(xs)
    if not xs:
        raise EmptySamples("geomean of no samples")
    if any(not x > 0 for x in xs):
        raise NonPositiveInput("geomean needs strictly positive inputs")
    return math.exp(sum(math.log(x) for x in xs) / len(xs))
