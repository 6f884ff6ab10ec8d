"""Paired two-sided t-tests between matched runs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import InputError


@dataclass(frozen=True)
class TTest:
    t: float
    p_value: float
    n: int
    mean_diff: float
    sd_diff: float
    degenerate: bool = False


def paired_ttest(diffs) -> TTest:
    """``t = mean(d) / (sd(d) / sqrt(n))`` with the sample (n - 1) standard deviation.

    Zero spread (up to round-off) is reported as ``degenerate``: ``t`` is 0 when the mean is
    also 0 and signed infinity otherwise.
    """
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    n = d.size
    if n < 2:
        raise InputError(f"paired t-test needs at least 2 pairs, got {n}")
    mean = float(d.sum() / n)
    sd = math.sqrt(float(((d - mean) ** 2).sum()) / (n - 1))
    # spread at round-off level of the mean counts as zero
    if sd <= 4 * np.finfo(np.float64).eps * abs(mean):
        if mean == 0.0:
            return TTest(0.0, 1.0, n, mean, sd, degenerate=True)
        return TTest(math.copysign(math.inf, mean), 0.0, n, mean, sd, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return TTest(t, p, n, mean, sd)
