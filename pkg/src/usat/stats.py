"""Rank-based significance tests with exact small-sample p-values.

Both tests enumerate the exact null distribution for small samples (with
midranks under ties) and fall back to a tie-corrected normal approximation
with continuity correction for larger ones. Results carry the method used
so reports can distinguish exact from approximate p-values.
"""

from __future__ import annotations

import math
from itertools import combinations
from typing import Sequence

import numpy as np

from .errors import DataError

EXACT_LIMIT_MANN_WHITNEY = 12  # n + m at or below this enumerates C(n+m, n) splits
EXACT_LIMIT_WILCOXON = 12      # n at or below this enumerates 2^n sign patterns


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing the average of their span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, str]:
    """Two-sided Mann-Whitney U test.

    Returns (U of the first sample, two-sided p, method), where method is
    "exact" (full enumeration, n+m <= 12) or "normal-approx" (tie-corrected,
    continuity-corrected) otherwise.
    """
    x = np.asarray(list(a), dtype=np.float64)
    y = np.asarray(list(b), dtype=np.float64)
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise DataError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    ranks = _midranks(pooled)
    u_obs = float(ranks[:n].sum() - n * (n + 1) / 2.0)

    if n + m <= EXACT_LIMIT_MANN_WHITNEY:
        total = 0
        le = 0
        ge = 0
        base = n * (n + 1) / 2.0
        for idx in combinations(range(n + m), n):
            u = float(ranks[list(idx)].sum() - base)
            total += 1
            if u <= u_obs:
                le += 1
            if u >= u_obs:
                ge += 1
        p = min(1.0, 2.0 * min(le / total, ge / total))
        return u_obs, p, "exact"

    mean = n * m / 2.0
    big_n = n + m
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    var = n * m / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if var <= 0:
        return u_obs, 1.0, "normal-approx"
    # continuity correction pulls the statistic half a step toward the mean
    z = (u_obs - mean - 0.5 * math.copysign(1.0, u_obs - mean)) / math.sqrt(var)
    if u_obs == mean:
        z = 0.0
    p = min(1.0, 2.0 * _normal_sf(abs(z)))
    return u_obs, p, "normal-approx"


def wilcoxon_signed_rank(diffs: Sequence[float]) -> tuple[float, float, str]:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped (documented convention). Returns
    (W = min(W+, W-), two-sided p, method); an all-zero input is degenerate
    and reports p = 1.0 with method "degenerate".
    """
    d = np.asarray(list(diffs), dtype=np.float64)
    if len(d) == 0:
        raise DataError("differences must be non-empty")
    d = d[d != 0.0]
    if len(d) == 0:
        return 0.0, 1.0, "degenerate"
    n = len(d)
    ranks = _midranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    total_rank = float(ranks.sum())

    if n <= EXACT_LIMIT_WILCOXON:
        lo = 0
        hi = 0
        count = 1 << n
        for pattern in range(count):
            wp = 0.0
            for i in range(n):
                if pattern >> i & 1:
                    wp += ranks[i]
            if wp <= w:
                lo += 1
            if wp >= total_rank - w:
                hi += 1
        p = min(1.0, (lo + hi) / count)
        return w, p, "exact"

    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if var <= 0:
        return w, 1.0, "normal-approx"
    z = (w - mean + 0.5) / math.sqrt(var)  # w <= mean by construction
    p = min(1.0, 2.0 * _normal_sf(abs(z)))
    return w, p, "normal-approx"
