"""Pulse-based DC resistance, SOC x temperature lookup tables and aging trends.

A pulse is a current step of at least ``min_delta_c`` (in C) that completes
within ``step_max_s`` and then holds (every sample within 10 % of the step of
the first post-step sample) for at least ``hold_min_s``.  The resistance is
the voltage response over the current response between the last pre-step
sample and the end of the hold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import DcrSettings, SystemConfig
from .errors import EmptyTable, InsufficientYears, NegativeResistance, ZeroCurrentDelta
from .fit import lstsq_slope
from .ingest import TelemetryChunk
from .periods import Period, years_since

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DcrPulse:
    t_start: float
    t_end: float
    v1: float
    v2: float
    i1: float
    i2: float
    soc_at_pulse: float
    temp_at_pulse: float

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


def estimate_dcr(pulse: DcrPulse) -> float:
    """R = (V2 - V1) / (I2 - I1); raises unless the result is positive."""
    di = pulse.i2 - pulse.i1
    if di == 0:
        raise ZeroCurrentDelta(f"pulse at t={pulse.t_start}: I1 == I2")
    r = (pulse.v2 - pulse.v1) / di
    if not r > 0:
        raise NegativeResistance(f"pulse at t={pulse.t_start}: R = {r:.6g} ohm")
    return r


class PulseDetector:
    """Streaming pulse detector; feed chunks with their SOC, then :meth:`finish`."""

    def __init__(self, config: SystemConfig, settings: DcrSettings | None = None,
                 idle_current: float | None = None) -> None:
        self.settings = settings or DcrSettings()
        self.min_delta = self.settings.min_delta_c * config.one_c_current
        self.idle = 0.01 * config.one_c_current if idle_current is None else idle_current
        self.pulses: list[DcrPulse] = []
        self._tail: tuple[np.ndarray, ...] | None = None
        self._next_t = -np.inf

    def update(self, chunk: TelemetryChunk, soc: np.ndarray) -> list[DcrPulse]:
        cols = (chunk.t, chunk.voltage, chunk.current, chunk.temperature,
                np.asarray(soc, dtype=np.float64), chunk.gap_before)
        if self._tail is not None:
            cols = tuple(np.concatenate([a, b]) for a, b in zip(self._tail, cols))
        found, resume = self._scan(*cols, final=False)
        self._tail = tuple(c[resume:] for c in cols)
        self.pulses.extend(found)
        return found

    def shift_soc(self, delta: float, before: float) -> None:
        """Add ``delta`` to carried SOC samples earlier than ``before``."""
        if self._tail is not None:
            cols = list(self._tail)
            cols[4] = cols[4] + np.where(cols[0] < before, delta, 0.0)
            self._tail = tuple(cols)

    def finish(self) -> list[DcrPulse]:
        if self._tail is None:
            return []
        found, _ = self._scan(*self._tail, final=True)
        self._tail = None
        self.pulses.extend(found)
        return found

    def _scan(self, t, v, i, temp, soc, gap, final: bool) -> tuple[list[DcrPulse], int]:
        s = self.settings
        n = len(t)
        out: list[DcrPulse] = []
        if n < 3 and not final:
            return out, 0
        cand: list[tuple[int, int]] = []
        for d in (1, 2):
            if n <= d:
                continue
            step = i[d:] - i[:-d]
            ok = (np.abs(step) >= self.min_delta) & (t[d:] - t[:-d] <= s.step_max_s)
            ok &= t[:-d] >= self._next_t
            if d == 2:
                mid = i[1:-1]
                band = s.hold_tolerance * np.abs(step)
                ok &= (np.abs(mid - i[:-2]) > band) & (np.abs(mid - i[2:]) > band)
                ok &= ~gap[1:-1]
            ok &= ~gap[d:]
            cand.extend((int(k), d) for k in np.flatnonzero(ok))
        cand.sort()
        resume = n
        for k, d in cand:
            j0 = k + d
            step = i[j0] - i[k]
            band = s.hold_tolerance * abs(step)
            j = j0
            truncated = False
            while True:
                if j + 1 >= n:
                    truncated = not final
                    break
                if gap[j + 1] or abs(i[j + 1] - i[j0]) > band or t[j + 1] - t[k] > s.pulse_max_s:
                    break
                j += 1
            if truncated:
                resume = min(resume, k)
                break
            if t[j] - t[j0] < s.hold_min_s:
                continue
            i1, i2 = float(i[k]), float(i[j])
            if i1 * i2 < 0 and abs(i1) > self.idle and abs(i2) > self.idle:
                continue
            out.append(DcrPulse(float(t[k]), float(t[j]), float(v[k]), float(v[j]), i1, i2,
                                float(soc[k]), float(temp[k])))
        if not final:
            # steps may still begin in the last two samples
            resume = min(resume, n - 2)
            self._next_t = float(t[resume])
        return out, resume


def detect_pulses(stream: Iterable[TelemetryChunk], soc: np.ndarray | Sequence[np.ndarray],
                  config: SystemConfig, settings: DcrSettings | None = None) -> list[DcrPulse]:
    """All pulses in ``stream``; ``soc`` is either one aligned array or one array per chunk."""
    det = PulseDetector(config, settings)
    if isinstance(soc, np.ndarray):
        pos = 0
        for chunk in stream:
            det.update(chunk, soc[pos:pos + len(chunk)])
            pos += len(chunk)
    else:
        for chunk, s in zip(stream, soc):
            det.update(chunk, s)
    det.finish()
    return det.pulses


@dataclass
class DcrTally:
    accepted: int = 0
    zero_delta: int = 0
    negative: int = 0

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "zero_current_delta": self.zero_delta,
                "negative_resistance": self.negative}


def accepted_values(pulses: Iterable[DcrPulse], tally: DcrTally | None = None) -> tuple[list[DcrPulse], np.ndarray]:
    tally = tally if tally is not None else DcrTally()
    kept, vals = [], []
    for p in pulses:
        try:
            r = estimate_dcr(p)
        except ZeroCurrentDelta:
            tally.zero_delta += 1
            continue
        except NegativeResistance:
            tally.negative += 1
            continue
        tally.accepted += 1
        kept.append(p)
        vals.append(r)
    return kept, np.asarray(vals, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DcrTable:
    """Median DCR per (SOC, temperature) bin; empty cells hold NaN."""

    soc_edges: np.ndarray
    temp_edges: np.ndarray
    median: np.ndarray  # (n_soc, n_temp)
    count: np.ndarray
    period: Period
    min_samples: int = 5
    tally: DcrTally = field(default_factory=DcrTally)

    @property
    def soc_centers(self) -> np.ndarray:
        return 0.5 * (self.soc_edges[1:] + self.soc_edges[:-1])

    @property
    def temp_centers(self) -> np.ndarray:
        return 0.5 * (self.temp_edges[1:] + self.temp_edges[:-1])

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.median)

    def filled(self) -> tuple[np.ndarray, np.ndarray]:
        """Grid with empty cells replaced by the nearest valid cell centre.

        Distances are measured in bin-index units; ties go to the lower
        SOC index, then the lower temperature index.
        """
        valid = self.valid
        if not valid.any():
            raise EmptyTable(f"no populated cells in table {self.period.label}")
        vi, vj = np.nonzero(valid)
        ii, jj = np.indices(valid.shape)
        d2 = (ii[..., None] - vi) ** 2 + (jj[..., None] - vj) ** 2
        nearest = np.argmin(d2, axis=-1)
        grid = self.median[vi[nearest], vj[nearest]]
        return grid, ~valid

    def lookup(self, soc, temp) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear interpolation over bin centres; returns (ohms, extrapolated)."""
        grid, fill = self.filled()
        sc, tc = self.soc_centers, self.temp_centers
        s = np.clip(np.asarray(soc, dtype=np.float64), sc[0], sc[-1])
        tt = np.clip(np.asarray(temp, dtype=np.float64), tc[0], tc[-1])
        a, fa = _interp_index(sc, s)
        b, fb = _interp_index(tc, tt)
        a1 = np.minimum(a + 1, len(sc) - 1)
        b1 = np.minimum(b + 1, len(tc) - 1)
        r = ((1 - fa) * (1 - fb) * grid[a, b] + fa * (1 - fb) * grid[a1, b]
             + (1 - fa) * fb * grid[a, b1] + fa * fb * grid[a1, b1])
        ext = ((fill[a, b] & ((1 - fa) * (1 - fb) > 0)) | (fill[a1, b] & (fa * (1 - fb) > 0))
               | (fill[a, b1] & ((1 - fa) * fb > 0)) | (fill[a1, b1] & (fa * fb > 0)))
        return r, ext

    def to_dict(self) -> dict:
        cells = [[{"dcr_ohm": (None if not np.isfinite(m) else float(m)), "n": int(c)}
                  for m, c in zip(mrow, crow)] for mrow, crow in zip(self.median, self.count)]
        return {
            "soc_edges": [float(x) for x in self.soc_edges],
            "temp_edges": [float(x) for x in self.temp_edges],
            "cells": cells,
            "period": {"start": self.period.start, "end": self.period.end, "label": self.period.label},
            "min_samples": self.min_samples,
            "tally": self.tally.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DcrTable":
        med = np.array([[np.nan if c["dcr_ohm"] is None else c["dcr_ohm"] for c in row] for row in d["cells"]])
        cnt = np.array([[c["n"] for c in row] for row in d["cells"]], dtype=np.int64)
        p = d["period"]
        return cls(np.asarray(d["soc_edges"], float), np.asarray(d["temp_edges"], float), med, cnt,
                   Period(p["start"], p["end"], p.get("label", "")), int(d.get("min_samples", 5)))


def _interp_index(centers: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(centers) == 1:
        return np.zeros(np.shape(x), dtype=np.int64), np.zeros(np.shape(x))
    k = np.clip(np.searchsorted(centers, x, side="right") - 1, 0, len(centers) - 2)
    f = (x - centers[k]) / (centers[k + 1] - centers[k])
    return k, f


def _bin(edges: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Bin index with closed last bin; -1 outside the edges."""
    k = np.searchsorted(edges, x, side="right") - 1
    k[x == edges[-1]] = len(edges) - 2
    k[(x < edges[0]) | (x > edges[-1])] = -1
    return k


def build_table(pulses: Sequence[DcrPulse], period: Period,
                settings: DcrSettings | None = None) -> DcrTable:
    """Per-bin median of the accepted pulse resistances."""
    s = settings or DcrSettings()
    tally = DcrTally()
    kept, vals = accepted_values(pulses, tally)
    if not kept:
        raise EmptyTable(f"no qualifying pulses in {period.label}")
    soc_edges = np.asarray(s.soc_edges, dtype=np.float64)
    temp_edges = np.asarray(s.temp_edges, dtype=np.float64)
    si = _bin(soc_edges, np.array([p.soc_at_pulse for p in kept]))
    ti = _bin(temp_edges, np.array([p.temp_at_pulse for p in kept]))
    shape = (len(soc_edges) - 1, len(temp_edges) - 1)
    med = np.full(shape, np.nan)
    cnt = np.zeros(shape, dtype=np.int64)
    inside = (si >= 0) & (ti >= 0)
    flat = si[inside] * shape[1] + ti[inside]
    v = vals[inside]
    for key in np.unique(flat):
        sel = v[flat == key]
        a, b = divmod(int(key), shape[1])
        cnt[a, b] = len(sel)
        if len(sel) >= s.min_samples:
            med[a, b] = float(np.median(sel))
    if not np.isfinite(med).any():
        log.warning("table %s: no cell reaches %d samples", period.label, s.min_samples)
    return DcrTable(soc_edges, temp_edges, med, cnt, period, s.min_samples, tally)


@dataclass(frozen=True)
class DcrTrend:
    soc_range: tuple[float, float]
    temp_range: tuple[float, float]
    years: tuple[float, ...]
    labels: tuple[str, ...]
    relative_pct: tuple[float, ...]
    gradient_pp_per_year: float

    def to_rows(self) -> list[tuple[str, str]]:
        rows = [(lab, f"{v:.6f}") for lab, v in zip(self.labels, self.relative_pct)]
        rows.append(("gradient_pp_per_year", f"{self.gradient_pp_per_year:.6f}"))
        return rows


def _cells_in(edges: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (edges[:-1] >= lo - 1e-9) & (edges[1:] <= hi + 1e-9)


def fit_trend(tables: Sequence[DcrTable], soc_range: tuple[float, float] = (40.0, 60.0),
              temp_range: tuple[float, float] = (20.0, 25.0)) -> DcrTrend:
    """Yearly mean DCR in range, normalised to the first year, and its LS slope.

    Only cells populated in every table enter the mean, so a change in which
    cells happen to be covered cannot masquerade as aging.  If no cell is
    shared by all tables, each table's own populated cells are used.
    """
    if len(tables) < 2:
        raise InsufficientYears(f"need >= 2 tables, got {len(tables)}")
    tables = sorted(tables, key=lambda tb: tb.period.start)
    first = tables[0]
    mask = np.outer(_cells_in(first.soc_edges, *soc_range), _cells_in(first.temp_edges, *temp_range))
    if not mask.any():
        raise InsufficientYears(f"no table cells inside SOC {soc_range} x T {temp_range}")
    common = mask.copy()
    for tb in tables:
        common &= tb.valid
    means, years, labels = [], [], []
    for tb in tables:
        sel = common if common.any() else (mask & tb.valid)
        if not sel.any():
            continue
        means.append(float(np.mean(tb.median[sel])))
        years.append(tb.period.midpoint)
        labels.append(tb.period.label)
    if len(means) < 2:
        raise InsufficientYears("fewer than 2 tables populated in the requested range")
    rel = [m / means[0] * 100.0 for m in means]
    x = years_since(years)
    return DcrTrend(tuple(soc_range), tuple(temp_range), tuple(x), tuple(labels), tuple(rel),
                    lstsq_slope(x, rel))
