"""Deterministic straight-line fits (fixed-order compensated sums)."""

from __future__ import annotations

import math
from typing import Sequence


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares (slope, intercept, r^2); r^2 is 1 for a perfect or flat fit."""
    n = len(x)
    if n < 2 or n != len(y):
        raise ValueError("need at least two (x, y) pairs of equal length")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxx = math.fsum((a - mx) ** 2 for a in x)
    if sxx == 0:
        raise ValueError("x values are all equal")
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    syy = math.fsum((b - my) ** 2 for b in y)
    slope = sxy / sxx
    r2 = 1.0 if syy == 0 else (sxy * sxy) / (sxx * syy)
    return slope, my - slope * mx, r2


def lstsq_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return linear_fit(x, y)[0]
