"""Charge/discharge phase extraction, filtering and overvoltage correction."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Iterable, Iterator, Sequence

import numpy as np

from .config import PhaseSettings, SystemConfig
from .dcr import DcrTable
from .errors import MissingDcrTable
from .ingest import TelemetryChunk


class Direction(str, enum.Enum):
    CHARGE = "charge"
    DISCHARGE = "discharge"


@dataclass(frozen=True, eq=False)
class OperationalPhase:
    phase_id: str
    direction: Direction
    t: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    temperature: np.ndarray
    soc: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def start(self) -> float:
        return float(self.t[0])

    @property
    def end(self) -> float:
        return float(self.t[-1])

    @property
    def soc_span(self) -> float:
        return float(abs(self.soc[-1] - self.soc[0]))

    @property
    def dynamics(self) -> np.ndarray:
        """|dI/dt| between consecutive samples (A/s)."""
        if len(self.t) < 2:
            return np.empty(0)
        return np.abs(np.diff(self.current)) / np.diff(self.t)

    @property
    def max_dynamic(self) -> float:
        d = self.dynamics
        return float(d.max()) if len(d) else 0.0

    @property
    def period_tag(self) -> tuple[int, int]:
        d = datetime.fromtimestamp(self.start, tz=timezone.utc)
        return d.year, d.month

    def slice(self, lo: int, hi: int, suffix: str) -> "OperationalPhase":
        return replace(self, phase_id=f"{self.phase_id}{suffix}", t=self.t[lo:hi],
                       voltage=self.voltage[lo:hi], current=self.current[lo:hi],
                       temperature=self.temperature[lo:hi], soc=self.soc[lo:hi])


@dataclass(frozen=True)
class PhaseAudit:
    phase_id: str
    direction: str
    start: float
    end: float
    soc_span_pct: float
    max_dynamic_a_per_s: float
    kept: bool
    reason: str

    HEADER = ("phase_id", "direction", "start", "end", "soc_span_pct",
              "max_dynamic_a_per_s", "kept", "reason")

    def row(self) -> tuple[str, ...]:
        return (self.phase_id, self.direction, f"{self.start:.0f}", f"{self.end:.0f}",
                f"{self.soc_span_pct:.4f}", f"{self.max_dynamic_a_per_s:.4f}",
                "1" if self.kept else "0", self.reason)


def _audit(p: OperationalPhase, kept: bool, reason: str) -> PhaseAudit:
    return PhaseAudit(p.phase_id, p.direction.value, p.start, p.end, p.soc_span,
                      p.max_dynamic, kept, reason)


class PhaseSplitter:
    """Streaming sign-run splitter.

    A phase is a maximal run of samples whose current has the same sign and
    magnitude at least ``idle_fraction`` of the 1C current.  Gaps close the
    running phase.  Runs shorter than two samples are not emitted.
    """

    def __init__(self, config: SystemConfig, settings: PhaseSettings | None = None,
                 id_prefix: str = "p") -> None:
        self.settings = settings or PhaseSettings()
        self.idle = self.settings.idle_fraction * config.one_c_current
        self.prefix = id_prefix
        self._count = 0
        self._carry: tuple[np.ndarray, ...] | None = None
        self._carry_sign = 0

    def update(self, chunk: TelemetryChunk, soc: np.ndarray) -> list[OperationalPhase]:
        cols = (chunk.t, chunk.voltage, chunk.current, chunk.temperature,
                np.asarray(soc, dtype=np.float64))
        n = len(chunk)
        if n == 0:
            return []
        i = chunk.current
        sgn = np.where(i >= self.idle, 1, np.where(i <= -self.idle, -1, 0)).astype(np.int8)
        prev = np.empty(n, np.int8)
        prev[0] = self._carry_sign
        prev[1:] = sgn[:-1]
        starts_new = (sgn != prev) | chunk.gap_before
        bounds = np.flatnonzero(starts_new)
        out: list[OperationalPhase] = []
        first_end = bounds[0] if len(bounds) else n
        if self._carry is not None:
            head = tuple(np.concatenate([c, x[:first_end]]) for c, x in zip(self._carry, cols))
            if first_end < n:
                self._emit(head, self._carry_sign, out)
                self._carry = None
            else:
                self._carry = head
                return out
        edges = list(bounds) + [n]
        for a, b in zip(edges[:-1], edges[1:]):
            s = int(sgn[a])
            if s == 0:
                continue
            seg = tuple(x[a:b] for x in cols)
            if b == n:
                self._carry = seg
            else:
                self._emit(seg, s, out)
        self._carry_sign = int(sgn[-1])
        if sgn[-1] == 0:
            self._carry = None
        return out

    @property
    def pending_start(self) -> float | None:
        """Start time of the phase still open at the end of the last chunk."""
        return float(self._carry[0][0]) if self._carry is not None else None

    def shift_soc(self, delta: float, before: float) -> None:
        """Add ``delta`` to carried SOC samples earlier than ``before``."""
        if self._carry is not None:
            cols = list(self._carry)
            cols[4] = cols[4] + np.where(cols[0] < before, delta, 0.0)
            self._carry = tuple(cols)

    def finish(self) -> list[OperationalPhase]:
        out: list[OperationalPhase] = []
        if self._carry is not None:
            self._emit(self._carry, self._carry_sign, out)
        self._carry = None
        self._carry_sign = 0
        return out

    def _emit(self, seg, sign: int, out: list[OperationalPhase]) -> None:
        if len(seg[0]) < 2:
            return
        self._count += 1
        d = Direction.CHARGE if sign > 0 else Direction.DISCHARGE
        out.append(OperationalPhase(f"{self.prefix}{self._count:06d}", d, *seg))


def split_by_sign(stream: Iterable[TelemetryChunk], soc: np.ndarray | Sequence[np.ndarray],
                  config: SystemConfig, settings: PhaseSettings | None = None) -> list[OperationalPhase]:
    sp = PhaseSplitter(config, settings)
    out: list[OperationalPhase] = []
    if isinstance(soc, np.ndarray):
        pos = 0
        for chunk in stream:
            out.extend(sp.update(chunk, soc[pos:pos + len(chunk)]))
            pos += len(chunk)
    else:
        for chunk, s in zip(stream, soc):
            out.extend(sp.update(chunk, s))
    out.extend(sp.finish())
    return out


def filter_throughput(phases: Iterable[OperationalPhase], min_soc_span: float = 5.0,
                      audit: list[PhaseAudit] | None = None) -> list[OperationalPhase]:
    """Keep phases whose SOC span is at least ``min_soc_span`` percent (inclusive)."""
    kept = []
    # tolerate float noise from the coulomb integral at the boundary
    limit = min_soc_span - 1e-9
    for p in phases:
        ok = p.soc_span >= limit
        if ok:
            kept.append(p)
        elif audit is not None:
            audit.append(_audit(p, False, "throughput"))
    return kept


def split_dynamics(phase: OperationalPhase, limit: float) -> list[OperationalPhase]:
    """Split a phase at every sample step whose |dI/dt| exceeds ``limit``."""
    d = phase.dynamics
    viol = np.flatnonzero(d > limit * (1 + 1e-12))
    if len(viol) == 0:
        return [phase]
    cuts = [0] + [int(k) + 1 for k in viol] + [len(phase)]
    out = []
    for n, (a, b) in enumerate(zip(cuts[:-1], cuts[1:])):
        if b > a:
            out.append(phase.slice(a, b, f".{n}"))
    return out


def filter_dynamics(phases: Iterable[OperationalPhase], config: SystemConfig,
                    max_dynamic_fraction: float = 0.10, min_soc_span: float | None = 5.0,
                    audit: list[PhaseAudit] | None = None) -> list[OperationalPhase]:
    """Split phases at dynamics violations; fragments go back through the throughput filter.

    The limit is ``max_dynamic_fraction`` of the 1C current per second.  Pass
    ``min_soc_span=None`` to return raw fragments.
    """
    limit = max_dynamic_fraction * config.one_c_current
    out: list[OperationalPhase] = []
    for p in phases:
        parts = split_dynamics(p, limit)
        if len(parts) == 1:
            out.append(p)
            continue
        if audit is not None:
            audit.append(_audit(p, False, f"split_dynamics:{len(parts)}"))
        frags = [f for f in parts if len(f) >= 2]
        if min_soc_span is None:
            out.extend(frags)
        else:
            out.extend(filter_throughput(frags, min_soc_span, audit))
    return out


def select_phases(phases: Iterable[OperationalPhase], config: SystemConfig,
                  settings: PhaseSettings | None = None,
                  audit: list[PhaseAudit] | None = None) -> list[OperationalPhase]:
    """Throughput filter, dynamics split, throughput filter on fragments."""
    s = settings or PhaseSettings()
    first = filter_throughput(phases, s.min_soc_span_pct, audit)
    kept = filter_dynamics(first, config, s.max_dynamic_fraction, s.min_soc_span_pct, audit)
    if audit is not None:
        audit.extend(_audit(p, True, "ok") for p in kept)
    return kept


@dataclass(frozen=True, eq=False)
class PartialQocvCurve:
    """Corrected voltage on a uniform SOC grid, ordered along the phase."""

    soc: np.ndarray
    voltage: np.ndarray
    direction: Direction
    source_phase_id: str
    mean_c_rate: float
    extrapolated: np.ndarray
    t_start: float = 0.0

    def __len__(self) -> int:
        return len(self.soc)

    def ascending(self) -> tuple[np.ndarray, np.ndarray]:
        """(soc, voltage) with SOC increasing."""
        if len(self.soc) > 1 and self.soc[0] > self.soc[-1]:
            return self.soc[::-1], self.voltage[::-1]
        return self.soc, self.voltage

    def shifted(self, offset: float) -> "PartialQocvCurve":
        return replace(self, soc=self.soc - offset)


def correct_overvoltage(phase: OperationalPhase, dcr_table: DcrTable | None,
                        config: SystemConfig, settings: PhaseSettings | None = None) -> PartialQocvCurve:
    """V_corr = V - I * DCR(SOC, T), resampled onto a uniform SOC grid."""
    s = settings or PhaseSettings()
    if dcr_table is None:
        raise MissingDcrTable(f"phase {phase.phase_id}: no DCR table")
    if not (dcr_table.period.start <= phase.start < dcr_table.period.end):
        raise MissingDcrTable(f"phase {phase.phase_id}: table {dcr_table.period.label} does not cover it")
    r, ext = dcr_table.lookup(phase.soc, phase.temperature)
    v_corr = phase.voltage - phase.current * r
    soc = phase.soc
    if soc[0] > soc[-1]:
        soc, v_corr, ext = soc[::-1], v_corr[::-1], ext[::-1]
    step = s.soc_grid_step
    lo = np.ceil(soc[0] / step - 1e-9) * step
    hi = np.floor(soc[-1] / step + 1e-9) * step
    grid = np.arange(round((hi - lo) / step) + 1) * step + lo if hi >= lo else np.empty(0)
    v_grid = np.interp(grid, soc, v_corr)
    e_grid = np.interp(grid, soc, ext.astype(np.float64)) > 0
    if phase.direction is Direction.DISCHARGE:
        grid, v_grid, e_grid = grid[::-1], v_grid[::-1], e_grid[::-1]
    c_rate = float(np.mean(np.abs(phase.current))) / config.one_c_current
    return PartialQocvCurve(grid, v_grid, phase.direction, phase.phase_id, c_rate, e_grid, phase.start)


def iter_partials(phases: Iterable[OperationalPhase], tables: Sequence[DcrTable], config: SystemConfig,
                  settings: PhaseSettings | None = None,
                  skipped: list[str] | None = None) -> Iterator[PartialQocvCurve]:
    """Correct each phase with the table whose period covers its start."""
    ordered = sorted(tables, key=lambda tb: tb.period.start)
    starts = np.array([tb.period.start for tb in ordered])
    for p in phases:
        k = int(np.searchsorted(starts, p.start, side="right")) - 1
        table = ordered[k] if k >= 0 else None
        try:
            curve = correct_overvoltage(p, table, config, settings)
        except MissingDcrTable:
            if skipped is not None:
                skipped.append(p.phase_id)
            continue
        if len(curve) >= 2:
            yield curve
