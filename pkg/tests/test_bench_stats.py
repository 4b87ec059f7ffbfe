import math
import random

import pytest
from hypothesis import given, strategies as st

from mrm.bench.stats import EmptySamples, NonPositiveInput, geomean, pareto_rank, percentile, uniform_open


def test_pareto_examples():
    assert 1 / 0.6 == pytest.approx(1.667, abs=1e-3)
    assert pareto_rank(0.6, 1, 1, 37) == 1
    assert pareto_rank(0.4, 1, 1, 37) == 2
    assert pareto_rank(1e-6, 1, 1, 37) == 37
    with pytest.raises(ValueError):
        pareto_rank(0.0, n=3)
    with pytest.raises(ValueError):
        pareto_rank(1.0, n=3)


@given(st.floats(1e-9, 1 - 1e-9), st.floats(0.2, 5), st.integers(1, 100))
def test_pareto_rank_in_range(u, alpha, n):
    assert 1 <= pareto_rank(u, alpha, 1.0, n) <= n


def test_pareto_frequencies_small_sample():
    rng = random.Random(1)
    ranks = [pareto_rank(uniform_open(rng), n=37) for _ in range(20000)]
    assert abs(ranks.count(1) / 20000 - 0.5) < 0.02
    assert abs(ranks.count(3) / 20000 - 1 / 12) < 0.01


def test_percentile_examples():
    assert percentile(list(range(1, 101)), 95) == 95
    assert percentile([4.2], 95) == 4.2
    assert percentile([5, 1, 3], 50) == 3
    assert percentile([5, 1, 3], 100) == 5
    with pytest.raises(EmptySamples):
        percentile([], 50)
    with pytest.raises(ValueError):
        percentile([1], 0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.01, 100))
def test_percentile_is_a_sample(xs, p):
    v = percentile(xs, p)
    assert v in xs
    assert sum(x <= v for x in xs) >= math.ceil(p / 100 * len(xs) - 1e-9)


def test_geomean_examples():
    assert geomean([1, 1, 1]) == 1
    assert geomean([2, 8]) == pytest.approx(4)
    assert geomean([3.5]) == pytest.approx(3.5)
    with pytest.raises(NonPositiveInput):
        geomean([1, 0])
    with pytest.raises(EmptySamples):
        geomean([])
