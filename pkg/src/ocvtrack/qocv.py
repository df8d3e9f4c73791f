"""Alignment and fusion of partial qOCV curves.

Partial curves are compared on a common voltage grid ``k * voltage_step``:
each partial is reduced to SOC-at-voltage, horizontally shifted towards the
cross-partial mean, and the shifted curves are averaged per grid voltage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import isotonic_regression

from .errors import InsufficientPhases, NoVoltageOverlap, VoltageOutOfRange
from .phases import Direction, PartialQocvCurve

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class QocvCurve:
    """A fused curve; ``axis`` names the uniformly gridded variable."""

    direction: Direction
    period: str
    voltage: np.ndarray
    mean_soc: np.ndarray
    n_contributing: np.ndarray
    soc_std: np.ndarray
    phase_count: int
    voltage_step: float
    axis: str = "voltage"
    cell_count: int = 1
    soc_floor: float | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.voltage)

    @property
    def vmin(self) -> float:
        return float(self.voltage[0])

    @property
    def vmax(self) -> float:
        return float(self.voltage[-1])

    def per_cell(self, cells: int) -> "QocvCurve":
        """Divide voltages by the series cell count."""
        if cells == 1:
            return self
        return replace(self, voltage=self.voltage / cells, voltage_step=self.voltage_step / cells,
                       cell_count=self.cell_count * cells)

    def soc_at(self, v: float | np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if np.any(v < self.vmin - 1e-9) or np.any(v > self.vmax + 1e-9):
            raise VoltageOutOfRange(f"{v} outside [{self.vmin:.4f}, {self.vmax:.4f}] V")
        return np.interp(v, self.voltage, self.mean_soc)

    def rebased(self) -> "QocvCurve":
        """SOC counted from the discharge end (``soc_floor`` or the lowest point)."""
        floor = self.soc_floor if self.soc_floor is not None else float(self.mean_soc[0])
        return replace(self, mean_soc=self.mean_soc - floor, soc_floor=0.0)

    def to_soc_grid(self, step: float = 0.25) -> "QocvCurve":
        """Resample voltage onto a uniform SOC grid (for DV analysis)."""
        s, v = _strictly_increasing(self.mean_soc, self.voltage)
        lo = np.ceil(s[0] / step - 1e-9) * step
        hi = np.floor(s[-1] / step + 1e-9) * step
        grid = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
        vg = np.interp(grid, s, v)
        n = np.interp(grid, s, np.interp(v, self.voltage, self.n_contributing))
        sd = np.interp(grid, s, np.interp(v, self.voltage, self.soc_std))
        return replace(self, voltage=vg, mean_soc=grid, n_contributing=n, soc_std=sd, axis="soc")

    def to_dict(self) -> dict:
        return {
            "direction": self.direction.value,
            "period": self.period,
            "phase_count": self.phase_count,
            "voltage_step": self.voltage_step,
            "axis": self.axis,
            "cell_count": self.cell_count,
            "soc_floor": self.soc_floor,
            "meta": self.meta,
        }


def _strictly_increasing(s: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop points that would make ``s`` non-increasing (isotonic fits can tie)."""
    keep = np.ones(len(s), bool)
    keep[1:] = np.diff(s) > 0
    return s[keep], v[keep]


def soc_at_voltage(soc: np.ndarray, voltage: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """SOC of one partial at each grid voltage (NaN outside its voltage range).

    Voltage is first made monotonic in SOC by isotonic regression; tied
    blocks collapse to their mean SOC so the inverse is single valued.
    """
    order = np.argsort(soc)
    s, v = soc[order], voltage[order]
    vi = isotonic_regression(v, increasing=True).x
    uv, inv = np.unique(vi, return_inverse=True)
    us = np.bincount(inv, weights=s) / np.bincount(inv)
    out = np.full(len(grid), np.nan)
    if len(uv) < 2:
        return out
    inside = (grid >= uv[0]) & (grid <= uv[-1])
    out[inside] = np.interp(grid[inside], uv, us)
    return out


def voltage_grid(partials: Sequence[PartialQocvCurve], step: float) -> np.ndarray:
    vmin = min(float(np.min(p.voltage)) for p in partials)
    vmax = max(float(np.max(p.voltage)) for p in partials)
    k0 = int(np.ceil(vmin / step - 1e-9))
    k1 = int(np.floor(vmax / step + 1e-9))
    return np.arange(k0, k1 + 1) * step


def soc_matrix(partials: Sequence[PartialQocvCurve], grid: np.ndarray) -> np.ndarray:
    return np.vstack([soc_at_voltage(p.soc, p.voltage, grid) for p in partials]) if partials else np.empty((0, len(grid)))


@dataclass(frozen=True, eq=False)
class Alignment:
    partials: list[PartialQocvCurve]
    offsets: np.ndarray
    dropped: list[str]
    no_overlap: list[str]
    iterations: int
    converged: bool


def align(partials: Sequence[PartialQocvCurve], voltage_step: float, tolerance: float = 0.01,
          max_iter: int = 20, outlier_limit: float = 10.0) -> Alignment:
    """Fixed-point alignment of partial SOC offsets against the pointwise mean.

    Offsets are re-centred to zero mean after every sweep so the absolute SOC
    frame of the population is preserved.  Partials whose final offset exceeds
    ``outlier_limit`` are dropped and the remaining set is aligned again.
    """
    partials = list(partials)
    if len(partials) < 2:
        return Alignment(partials, np.zeros(len(partials)), [], [], 0, True)
    grid = voltage_grid(partials, voltage_step)
    S = soc_matrix(partials, grid)
    active = np.ones(len(partials), bool)
    dropped: list[str] = []
    while True:
        offsets, overlap, it, conv = _solve_offsets(S, active, tolerance, max_iter)
        bad = active & overlap & (np.abs(offsets) > outlier_limit)
        if not bad.any():
            break
        worst = int(np.argmax(np.where(bad, np.abs(offsets), -1)))
        active[worst] = False
        dropped.append(partials[worst].source_phase_id)
        log.debug("dropped partial %s, offset %.2f pp", partials[worst].source_phase_id, offsets[worst])
    no_overlap = [p.source_phase_id for p, a, o in zip(partials, active, overlap) if a and not o]
    out = [p.shifted(float(off)) if (a and o) else p
           for p, a, o, off in zip(partials, active, overlap, offsets) if a]
    offs = np.array([off for a, off in zip(active, offsets) if a])
    return Alignment(out, offs, dropped, no_overlap, it, conv)


def _solve_offsets(S: np.ndarray, active: np.ndarray, tol: float, max_iter: int):
    mask = np.isfinite(S) & active[:, None]
    counts = mask.sum(axis=0)
    shared = counts >= 2
    overlap = (mask & shared).any(axis=1)
    use = active & overlap
    offsets = np.zeros(S.shape[0])
    if use.sum() < 2:
        return offsets, overlap, 0, True
    m_use = mask & use[:, None]
    filled = np.where(m_use, S, 0.0)
    it, conv = 0, False
    for it in range(1, max_iter + 1):
        shifted = filled - offsets[:, None] * m_use
        n = m_use.sum(axis=0)
        mean = np.divide(shifted.sum(axis=0), n, out=np.zeros(S.shape[1]), where=n > 0)
        w = m_use & (n >= 2)
        resid = np.where(w, shifted - mean, 0.0)
        cnt = w.sum(axis=1)
        delta = np.divide(resid.sum(axis=1), cnt, out=np.zeros(S.shape[0]), where=cnt > 0)
        new = offsets + delta
        new[use] -= new[use].mean()
        change = np.max(np.abs(new - offsets)[use])
        offsets = new
        if change < tol:
            conv = True
            break
    return offsets, overlap, it, conv


def align_partials(partials: Sequence[PartialQocvCurve], voltage_step: float = 0.005,
                   tolerance: float = 0.01, max_iter: int = 20,
                   outlier_limit: float = 10.0) -> list[PartialQocvCurve]:
    """Aligned partials (outliers removed); partials without overlap pass through unshifted."""
    res = align(partials, voltage_step, tolerance, max_iter, outlier_limit)
    if res.no_overlap:
        log.info("%d partial(s) share no voltage range with the rest: %s",
                 len(res.no_overlap), NoVoltageOverlap.__name__)
    return res.partials


def fuse(partials: Sequence[PartialQocvCurve], voltage_step: float = 0.005,
         min_phases_per_point: int = 3, min_phases_per_period: int = 20,
         period: str = "", direction: Direction | None = None) -> QocvCurve:
    """Mean and population std of SOC at each grid voltage.

    The grid is restricted to the longest contiguous run of voltages covered
    by at least ``min_phases_per_point`` partials.  The mean is finally made
    non-decreasing by an isotonic fit weighted by the contributing count.
    """
    partials = list(partials)
    if len(partials) < min_phases_per_period:
        raise InsufficientPhases(f"{len(partials)} partials < {min_phases_per_period} required")
    if direction is None:
        direction = partials[0].direction
    grid = voltage_grid(partials, voltage_step)
    S = soc_matrix(partials, grid)
    fin = np.isfinite(S)
    n = fin.sum(axis=0)
    ok = n >= min_phases_per_point
    if not ok.any():
        raise InsufficientPhases(f"no grid voltage covered by {min_phases_per_point} partials")
    lo, hi = _longest_run(ok)
    S, fin, n, grid = S[:, lo:hi], fin[:, lo:hi], n[lo:hi], grid[lo:hi]
    Z = np.where(fin, S, 0.0)
    mean = Z.sum(axis=0) / n
    var = np.where(fin, (S - mean) ** 2, 0.0).sum(axis=0) / n
    mean = isotonic_regression(mean, weights=n.astype(np.float64), increasing=True).x
    floor = _soc_floor(partials, grid[0], voltage_step)
    return QocvCurve(direction, period, grid, mean, n, np.sqrt(var), len(partials),
                     voltage_step, soc_floor=floor)


def _longest_run(ok: np.ndarray) -> tuple[int, int]:
    best, start, best_span = (0, 0), None, 0
    for k, flag in enumerate(np.append(ok, False)):
        if flag and start is None:
            start = k
        elif not flag and start is not None:
            if k - start > best_span:
                best, best_span = (start, k), k - start
            start = None
    return best


def _soc_floor(partials: Sequence[PartialQocvCurve], v_low: float, step: float,
               min_count: int = 3) -> float | None:
    """Median lowest SOC of the partials that reach the bottom voltage band.

    Those partials ended at the discharge limit, so their lowest SOC marks
    the empty end of the curve more closely than the first grid point.
    """
    ends = [float(np.min(p.soc)) for p in partials if float(np.min(p.voltage)) <= v_low + step]
    if len(ends) < min_count:
        return None
    return float(np.median(ends))


def capacity_fade(curve_a: QocvCurve, curve_b: QocvCurve, at_voltage: float,
                  rebase: bool = True) -> float:
    """SOC_a(V) - SOC_b(V) in percentage points.

    With ``rebase`` both curves count SOC from their own discharge end, so a
    loss of usable capacity shows up as a lower SOC at the charge limit.
    """
    if rebase:
        curve_a, curve_b = curve_a.rebased(), curve_b.rebased()
    return float(curve_a.soc_at(at_voltage) - curve_b.soc_at(at_voltage))


def fade_voltage(curves: Sequence[QocvCurve], eoc_voltage: float) -> float:
    """EOC voltage clipped to the range every curve covers."""
    top = min(c.vmax for c in curves)
    bottom = max(c.vmin for c in curves)
    v = min(eoc_voltage, top)
    if v < bottom:
        raise VoltageOutOfRange("curves do not share a voltage range")
    return v
