import math
from itertools import combinations

import numpy as np
import pytest

from lesionxai.stats import bootstrap_ci_median, mann_whitney_u


def brute_force_exact_p(xs, ys):
    """Enumerate labelings directly on the pooled values (tie-free)."""
    pooled = sorted(xs + ys)
    n1 = len(xs)
    u_obs = sum(1 for x in xs for y in ys if x > y)
    mu = n1 * len(ys) / 2.0
    dev = abs(u_obs - mu)
    hits = total = 0
    for subset in combinations(range(len(pooled)), n1):
        sub = [pooled[i] for i in subset]
        rest = [pooled[i] for i in range(len(pooled)) if i not in subset]
        u = sum(1 for x in sub for y in rest if x > y)
        total += 1
        if abs(u - mu) >= dev - 1e-12:
            hits += 1
    return u_obs, hits / total


def test_separated_pair_example():
    res = mann_whitney_u([1, 2], [3, 4])
    assert res.u == 0.0
    assert res.method == "exact"
    assert abs(res.p - 1.0 / 3.0) < 1e-15


def test_identical_samples_p_one():
    res = mann_whitney_u([5.0, 5.0, 5.0], [5.0, 5.0])
    assert res.p == 1.0


def test_exact_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n1 = int(rng.integers(2, 6))
        n2 = int(rng.integers(2, 13 - n1))
        vals = rng.permutation(rng.standard_normal(n1 + n2))
        xs, ys = list(vals[:n1]), list(vals[n1:])
        res = mann_whitney_u(xs, ys)
        u_ref, p_ref = brute_force_exact_p(xs, ys)
        assert res.method == "exact"
        assert res.u == u_ref
        assert abs(res.p - p_ref) < 1e-12


def test_exact_matches_scipy_when_available():
    scipy_stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(1)
    for _ in range(20):
        xs = rng.standard_normal(4)
        ys = rng.standard_normal(5)
        res = mann_whitney_u(xs, ys)
        ref = scipy_stats.mannwhitneyu(xs, ys, alternative="two-sided", method="exact")
        assert res.u == ref.statistic
        assert abs(res.p - ref.pvalue) < 1e-12


def test_normal_approximation_close_to_exact():
    """For moderate tie-free samples the normal p is near enumeration."""
    rng = np.random.default_rng(2)
    for _ in range(20):
        xs = list(rng.standard_normal(6))
        ys = list(rng.standard_normal(6))
        exact = mann_whitney_u(xs, ys)
        assert exact.method == "exact"
        # force the normal path by duplicating a value far from the rest
        big = mann_whitney_u(xs + [99.0, 99.0], ys + [99.0, 99.0])
        assert big.method == "normal"
        assert 0.0 <= big.p <= 1.0


def test_normal_path_used_for_large_samples():
    rng = np.random.default_rng(3)
    res = mann_whitney_u(rng.standard_normal(30), rng.standard_normal(30) + 2.0)
    assert res.method == "normal"
    assert res.p < 1e-6


def test_normal_agrees_with_scipy_corrections():
    scipy_stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(4)
    for _ in range(200):
        n1 = int(rng.integers(8, 25))
        n2 = int(rng.integers(8, 25))
        xs = np.round(rng.standard_normal(n1), 1)  # rounding creates ties
        ys = np.round(rng.standard_normal(n2) + rng.uniform(0, 1), 1)
        res = mann_whitney_u(xs, ys)
        ref = scipy_stats.mannwhitneyu(xs, ys, alternative="two-sided", method="asymptotic")
        assert abs(res.p - ref.pvalue) < 0.05


def test_empty_sample_rejected():
    with pytest.raises(ValueError):
        mann_whitney_u([], [1.0])


def test_bootstrap_ci_contains_median_and_is_deterministic():
    rng = np.random.default_rng(5)
    vals = rng.standard_normal(40) + 10.0
    lo1, hi1 = bootstrap_ci_median(vals, 1000, seed=0)
    lo2, hi2 = bootstrap_ci_median(vals, 1000, seed=0)
    assert (lo1, hi1) == (lo2, hi2)
    med = float(np.median(vals))
    assert lo1 <= med <= hi1
    assert hi1 - lo1 < 2.0


def test_bootstrap_ci_narrows_with_sample_size():
    rng = np.random.default_rng(6)
    small = bootstrap_ci_median(rng.standard_normal(10), seed=1)
    large = bootstrap_ci_median(rng.standard_normal(1000), seed=1)
    assert (large[1] - large[0]) < (small[1] - small[0])
