"""Two-sided Mann-Whitney U test and bootstrap confidence intervals.

The exact two-sided p-value is computed by enumerating all rank labelings
when the pooled sample is small (n + m <= 12) and tie-free; otherwise the
normal approximation with midrank tie correction and continuity correction
is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

EXACT_LIMIT = 12


@dataclass
class UTestResult:
    u: float  # U statistic of the first sample
    p: float  # two-sided
    method: str  # exact | normal


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(xs, ys) -> UTestResult:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n1, n2 = len(xs), len(ys)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([xs, ys])
    ranks = _midranks(pooled)
    r1 = ranks[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0  # pairs (x, y) with x > y, midrank-weighted
    ties = len(np.unique(pooled)) < n1 + n2
    if n1 + n2 <= EXACT_LIMIT and not ties:
        return UTestResult(float(u1), _exact_two_sided_p(pooled, n1, u1), "exact")
    return UTestResult(float(u1), _normal_two_sided_p(pooled, n1, n2, u1), "normal")


def _u_from_rank_subset(rank_subset, n1: int, n2: int) -> float:
    return sum(rank_subset) - n1 * (n1 + 1) / 2.0


def _exact_two_sided_p(pooled: np.ndarray, n1: int, u1: float) -> float:
    """Enumerate all C(n1+n2, n1) labelings of the tie-free pooled sample."""
    n = len(pooled)
    n2 = n - n1
    mu = n1 * n2 / 2.0
    dev = abs(u1 - mu)
    count = 0
    total = 0
    for subset in combinations(range(1, n + 1), n1):
        u = _u_from_rank_subset(subset, n1, n2)
        if abs(u - mu) >= dev - 1e-12:
            count += 1
        total += 1
    return count / total


def _normal_two_sided_p(pooled: np.ndarray, n1: int, n2: int, u1: float) -> float:
    n = n1 + n2
    mu = n1 * n2 / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = max(abs(u1 - mu) - 0.5, 0.0) / math.sqrt(var)  # continuity correction
    p = 2.0 * 0.5 * math.erfc(z / math.sqrt(2.0))
    return min(p, 1.0)


def bootstrap_ci_median(
    values, n_resamples: int = 1000, alpha: float = 0.05, seed: int = 0
) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the median."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("empty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_resamples, len(values)))
    medians = np.median(values[idx], axis=1)
    lo, hi = np.quantile(medians, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)
