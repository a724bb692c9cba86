"""Wilcoxon signed-rank test with an exact null distribution for small samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 25


@dataclass(frozen=True)
class SignedRankResult:
    statistic: float  # W+, the sum of ranks of positive differences
    pvalue: float
    n: int  # non-zero differences actually ranked
    method: str  # "exact", "normal" or "degenerate"


def signed_rank_null_counts(doubled_ranks) -> np.ndarray:
    """Number of sign patterns giving each value of 2*W+.

    Ranks are doubled so mid-ranks from ties stay integral; the counts come from
    the usual subset-sum recursion over the 2**n equally likely sign patterns.
    """
    doubled_ranks = [int(r) for r in doubled_ranks]
    counts = np.zeros(sum(doubled_ranks) + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y=None, method="auto") -> SignedRankResult:
    """Two-sided test of zero median difference for paired samples.

    Zero differences are dropped before ranking.  ``method="auto"`` uses the
    exact null for n <= 25 and a tie-corrected normal approximation beyond.
    """
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        d = d - np.asarray(y, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return SignedRankResult(0.0, 1.0, 0, "degenerate")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        counts = signed_rank_null_counts(np.round(2 * ranks).astype(int))
        t = int(round(2 * w_plus))
        total = 2 ** n
        lower = sum(counts[: t + 1])
        upper = sum(counts[t:])
        p = min(1.0, 2.0 * float(min(lower, upper)) / total)
    elif method == "normal":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        if var <= 0:
            return SignedRankResult(w_plus, 1.0, n, "degenerate")
        # continuity correction toward the mean
        z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
        p = min(1.0, 2.0 * float(norm.sf(max(z, 0.0))))
    else:
        raise ValueError(f"unknown method {method!r}")
    return SignedRankResult(w_plus, p, n, method)
