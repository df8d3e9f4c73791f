"""Pearson correlation of FOI tracks with SOH, with two-tailed t-test p-values."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import DegenerateR, LengthMismatch, StatsError, TooFewSamples, ZeroVariance
from .foi import FoiTrack

_EPS = 1e-16
_TINY = 1e-300


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    n = len(x)
    if n != len(y):
        raise LengthMismatch(f"lengths differ: {n} vs {len(y)}")
    if n < 3:
        raise TooFewSamples(f"need n >= 3, got {n}")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [a - mx for a in x]
    dy = [b - my for b in y]
    sxx = math.fsum(a * a for a in dx)
    syy = math.fsum(b * b for b in dy)
    if sxx == 0 or syy == 0:
        raise ZeroVariance("a series has zero variance")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, 500):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise StatsError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise StatsError(f"x = {x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    bt = math.exp(lbt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def t_two_tailed(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise StatsError("df must be positive")
    if math.isinf(t):
        return 0.0
    a, b = 0.5 * df, 0.5
    x = df / (df + t * t)
    if x < (a + 1.0) / (a + b + 2.0):
        p = betainc(a, b, x)
    else:
        # near x = 1 take the complement from t directly; 1 - x would cancel
        p = 1.0 - betainc(b, a, t * t / (df + t * t))
    return min(1.0, max(0.0, p))


def p_value(r: float, n: int) -> float:
    """Two-tailed p of the t-test on a Pearson r from n samples."""
    if n < 3:
        raise TooFewSamples(f"need n >= 3, got {n}")
    if not -1.0 <= r <= 1.0:
        raise StatsError(f"r = {r} outside [-1, 1]")
    if abs(r) == 1.0:
        raise DegenerateR("|r| = 1; p is 0 by convention")
    df = n - 2
    t = r * math.sqrt(df / (1.0 - r * r))
    return t_two_tailed(t, df)


@dataclass(frozen=True)
class CorrelationResult:
    foi_id: int
    feature: str
    r: float
    p_value: float
    n: int
    degenerate: bool = False

    HEADER = ("foi", "feature", "r", "p")

    def row(self) -> tuple[str, str, str, str]:
        return (str(self.foi_id), self.feature, f"{self.r:.6f}", f"{self.p_value:.6g}")


def correlate(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, bool]:
    """(r, p, degenerate); |r| within 1e-12 of 1 counts as exactly 1 with p = 0."""
    r = pearson(x, y)
    if abs(abs(r) - 1.0) < 1e-12:
        return math.copysign(1.0, r), 0.0, True
    return r, p_value(r, len(x)), False


def correlate_tracks(tracks: Sequence[FoiTrack], soh: Mapping[str, float],
                     min_overlap: int = 3) -> tuple[list[CorrelationResult], dict[str, str]]:
    """Correlate each track's normalised values with SOH over shared periods.

    Returns the results and ``{track key: reason}`` for skipped tracks.
    """
    results, skipped = [], {}
    for tr in tracks:
        pairs = [(o.normalized, soh[o.period]) for o in tr.observations if o.period in soh]
        if len(pairs) < min_overlap:
            skipped[tr.key] = f"InsufficientOverlap: {len(pairs)} shared periods"
            continue
        try:
            r, p, deg = correlate([a for a, _ in pairs], [b for _, b in pairs])
        except ZeroVariance as exc:
            skipped[tr.key] = f"ZeroVariance: {exc}"
            continue
        results.append(CorrelationResult(tr.spec.foi_id, tr.quantity, r, p, len(pairs), deg))
    return results, skipped


def read_soh(path: str | Path) -> dict[str, float]:
    """SOH per period from a ``period,soh_pct`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["period", "soh_pct"]:
            raise StatsError(f"{path}: expected header period,soh_pct")
        return {row["period"].strip(): float(row["soh_pct"]) for row in reader}
