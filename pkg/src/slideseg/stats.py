"""Paired nonparametric testing: Wilcoxon signed-rank.

Zero differences are dropped, tied absolute differences get mid-ranks, and
the reported statistic is W = min(positive rank sum, negative rank sum).
For n_effective <= 25 the p-value is exact over all 2^n sign assignments
(computed by subset-sum counting, which enumerates the same distribution);
beyond that a normal approximation with tie and continuity corrections is
used. Two-sided by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateTestError, InputError

EXACT_CUTOFF = 25


class WilcoxonMethod(Enum):
    EXACT = "exact"
    NORMAL_APPROX = "normal_approx"


@dataclass(frozen=True)
class WilcoxonResult:
    n_effective: int
    w_statistic: float
    p_value: float
    method: WilcoxonMethod


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean of their span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_tail_counts(double_ranks: np.ndarray) -> np.ndarray:
    """counts[s] = number of sign assignments whose doubled positive-rank sum is s."""
    total = int(double_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for dr in double_ranks:
        dr = int(dr)
        counts[dr:] += counts[: counts.size - dr].copy()
    return counts


def wilcoxon_signed_rank(
    paired_a, paired_b, alternative: str = "two-sided"
) -> WilcoxonResult:
    """Wilcoxon signed-rank test on paired samples.

    ``alternative`` is "two-sided" (default), "greater" (a tends above b),
    or "less".
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise InputError(
            f"paired samples must be equal-length 1D with n >= 1, got {a.shape} vs {b.shape}"
        )
    if alternative not in ("two-sided", "greater", "less"):
        raise InputError(f"unknown alternative {alternative!r}")
    diff = a - b
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    ranks = _midranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    w = min(w_plus, w_minus)

    if n <= EXACT_CUTOFF:
        double_ranks = np.rint(ranks * 2).astype(np.int64)
        counts = _exact_tail_counts(double_ranks)
        total = counts.sum()  # 2^n
        s_max = counts.size - 1
        wp2 = int(round(w_plus * 2))
        if alternative == "greater":
            tail = counts[wp2:].sum()
        elif alternative == "less":
            tail = counts[: wp2 + 1].sum()
        else:
            w2 = int(round(w * 2))
            tail = counts[: w2 + 1].sum() + counts[s_max - w2 :].sum()
        p = min(1.0, float(tail / total))
        return WilcoxonResult(n, w, p, WilcoxonMethod.EXACT)

    # Normal approximation with tie correction and continuity correction.
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(diff), return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts).sum()) / 48.0)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        raise DegenerateTestError("zero variance in rank sums")
    sd = math.sqrt(var)

    def phi(z: float) -> float:
        return 0.5 * math.erfc(-z / math.sqrt(2.0))

    if alternative == "two-sided":
        z = (w - mean + 0.5) / sd
        p = min(1.0, 2.0 * phi(z))
    elif alternative == "greater":
        z = (w_plus - mean - 0.5) / sd
        p = 1.0 - phi(z)
    else:
        z = (w_plus - mean + 0.5) / sd
        p = phi(z)
    p = max(min(p, 1.0), np.nextafter(0.0, 1.0))
    return WilcoxonResult(n, w, p, WilcoxonMethod.NORMAL_APPROX)
