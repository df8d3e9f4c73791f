"""End-to-end orchestration: telemetry -> DCR tables -> partials -> qOCV -> IC/DV -> FOI.

:func:`scan` is the single streaming pass over the telemetry.  Selected
phases are buffered per DCR table period and turned into partial qOCV
curves as soon as the period is complete, so memory stays bounded by one
period of phases.  Until the first full-charge anchor the SOC is counted
from the configured start value; once the anchor fixes the true start,
everything collected so far is shifted by the difference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig, SystemConfig
from .dcr import DcrPulse, DcrTable, DcrTrend, PulseDetector, build_table, fit_trend
from .diff import DiffCurve, dva, ica, smooth
from .errors import EmptyTable, InsufficientPhases, InsufficientYears, OcvTrackError, SigmaTooLarge
from .foi import DmReport, FoiSpec, FoiTrack, PeriodCurve, attribute_dm, builtin_catalog, track_all
from .ingest import IngestStats, SocCounter, TelemetryChunk, TelemetryStream
from .periods import Period, period_of, years_since
from .phases import (Direction, OperationalPhase, PartialQocvCurve, PhaseAudit, PhaseSplitter,
                     iter_partials, select_phases)
from .qocv import Alignment, QocvCurve, align, capacity_fade, fade_voltage, fuse
from .stats import CorrelationResult, correlate_tracks

log = logging.getLogger(__name__)

# pulses are final once the detector has moved this far past them
_PULSE_LAG_S = 30.0


@dataclass
class SocSummary:
    initial_soc: float
    initial_soc_source: str
    anchors: int
    anchored: bool
    clamp_count: int
    anchor_drifts: list[float]

    def to_dict(self) -> dict:
        return {"initial_soc": self.initial_soc, "initial_soc_source": self.initial_soc_source,
                "full_charge_anchors": self.anchors, "anchored": self.anchored,
                "confidence": "normal" if self.anchored else "low",
                "clamp_count": self.clamp_count, "anchor_drifts_pp": self.anchor_drifts}


@dataclass
class ScanResult:
    """Everything the streaming pass produces."""

    stats: IngestStats
    soc: SocSummary
    pulses: list[DcrPulse]
    tables: list[DcrTable]
    partials: list[PartialQocvCurve]
    audit: list[PhaseAudit]
    phase_count: int
    kept_phase_count: int
    missing_table: list[str] = field(default_factory=list)
    first_t: float = float("nan")
    last_t: float = float("nan")

    def counts(self) -> dict:
        return {
            "rows_read": self.stats.rows_read,
            "malformed": self.stats.malformed,
            "gaps": len(self.stats.gaps),
            "pulses": len(self.pulses),
            "dcr_tables": len(self.tables),
            "phases": self.phase_count,
            "phases_kept": self.kept_phase_count,
            "partials": len(self.partials),
            "phases_without_table": len(self.missing_table),
        }


class _PeriodBuffer:
    """Phases and pulses waiting for their DCR table period to close."""

    def __init__(self, kind: str) -> None:
        self.kind = kind
        self.phases: dict[str, list[OperationalPhase]] = {}
        self.periods: dict[str, Period] = {}
        self.pulses: dict[str, list[DcrPulse]] = {}

    def add_pulse(self, p: DcrPulse) -> None:
        per = period_of(p.t_start, self.kind)
        self.periods.setdefault(per.label, per)
        self.pulses.setdefault(per.label, []).append(p)

    def add_phase(self, ph: OperationalPhase) -> None:
        per = period_of(ph.start, self.kind)
        self.periods.setdefault(per.label, per)
        self.phases.setdefault(per.label, []).append(ph)

    def closed(self, horizon: float) -> list[Period]:
        return sorted(p for p in self.periods.values() if p.end <= horizon)

    def pop(self, per: Period) -> tuple[list[DcrPulse], list[OperationalPhase]]:
        self.periods.pop(per.label, None)
        return self.pulses.pop(per.label, []), self.phases.pop(per.label, [])

    def shift_soc(self, delta: float, before: float) -> None:
        for lab, ps in self.pulses.items():
            self.pulses[lab] = [_shift_pulse(p, delta, before) for p in ps]
        for lab, phs in self.phases.items():
            self.phases[lab] = [_shift_phase(ph, delta, before) for ph in phs]


def _shift_pulse(p: DcrPulse, delta: float, before: float) -> DcrPulse:
    return replace(p, soc_at_pulse=p.soc_at_pulse + delta) if p.t_start < before else p


def _shift_phase(ph: OperationalPhase, delta: float, before: float) -> OperationalPhase:
    if ph.start >= before:
        return ph
    return replace(ph, soc=ph.soc + np.where(ph.t < before, delta, 0.0))


def scan(stream: TelemetryStream | Iterable[TelemetryChunk], config: SystemConfig,
         run: RunConfig | None = None,
         manual_anchors: Sequence[tuple[float, float]] = ()) -> ScanResult:
    """Single pass: SOC, pulses, DCR tables, phase selection and overvoltage correction."""
    run = run or RunConfig()
    auto_start = run.soc.initial_soc is None
    counter = SocCounter(config, run.soc, manual_anchors)
    detector = PulseDetector(config, run.dcr, idle_current=run.phases.idle_fraction * config.one_c_current)
    splitter = PhaseSplitter(config, run.phases)
    buf = _PeriodBuffer(run.dcr.table_period)
    pulses: list[DcrPulse] = []
    tables: list[DcrTable] = []
    partials: list[PartialQocvCurve] = []
    audit: list[PhaseAudit] = []
    missing: list[str] = []
    n_phases = n_kept = 0
    shifted = not auto_start
    start_source = "configured" if not auto_start else "default"
    first_t = last_t = float("nan")

    def take_phases(found: list[OperationalPhase]) -> None:
        nonlocal n_phases, n_kept
        n_phases += len(found)
        kept = select_phases(found, config, run.phases, audit)
        n_kept += len(kept)
        for ph in kept:
            buf.add_phase(ph)

    def close(horizon: float) -> None:
        for per in buf.closed(horizon):
            ps, phs = buf.pop(per)
            pulses.extend(ps)
            table = None
            if ps:
                try:
                    table = build_table(ps, per, run.dcr)
                except EmptyTable as exc:
                    log.info("%s", exc)
            if table is not None and table.valid.any():
                tables.append(table)
                partials.extend(iter_partials(phs, [table], config, run.phases, missing))
            else:
                missing.extend(ph.phase_id for ph in phs)

    for chunk in stream:
        if len(chunk) == 0:
            continue
        if first_t != first_t:
            first_t = float(chunk.t[0])
        last_t = float(chunk.t[-1])
        soc = counter.update(chunk)
        for p in detector.update(chunk, soc):
            buf.add_pulse(p)
        take_phases(splitter.update(chunk, soc))
        if not shifted:
            est = counter.initial_soc_estimate()
            if est is not None:
                delta = est - counter.initial_soc
                before = counter.anchors[0].t
                buf.shift_soc(delta, before)
                pulses[:] = [_shift_pulse(p, delta, before) for p in pulses]
                partials[:] = [replace(c, soc=c.soc + delta) if c.t_start < before else c for c in partials]
                detector.shift_soc(delta, before)
                splitter.shift_soc(delta, before)
                shifted = True
                start_source = "first_anchor"
        pending = splitter.pending_start
        horizon = min(last_t - _PULSE_LAG_S, pending if pending is not None else np.inf)
        close(horizon)
    for p in detector.finish():
        buf.add_pulse(p)
    take_phases(splitter.finish())
    close(np.inf)

    stats = getattr(stream, "stats", IngestStats())
    est = counter.initial_soc_estimate()
    initial = est if (auto_start and est is not None) else counter.initial_soc
    summary = SocSummary(float(initial), start_source, len(counter.anchors), bool(counter.anchors),
                         counter.clamp_count, [float(x) for x in counter.anchor_drifts])
    if not counter.anchors:
        log.warning("no full-charge anchor found; SOC is low confidence")
    pulses.sort(key=lambda p: p.t_start)
    return ScanResult(stats, summary, pulses, tables, partials, audit, n_phases, n_kept,
                      missing, first_t, last_t)


# --------------------------------------------------------------------------
# qOCV


@dataclass
class PeriodCurves:
    """Fused curves per (period label, direction) plus bookkeeping."""

    curves: dict[tuple[str, str], QocvCurve]
    alignments: dict[tuple[str, str], Alignment]
    skipped: dict[tuple[str, str], str]
    period_start: dict[str, float]

    def directions(self) -> list[str]:
        return sorted({d for _, d in self.curves})

    def series(self, direction: str) -> list[tuple[str, QocvCurve]]:
        keys = sorted((k for k in self.curves if k[1] == direction), key=lambda k: self.period_start[k[0]])
        return [(k[0], self.curves[k]) for k in keys]


def build_curves(partials: Sequence[PartialQocvCurve], config: SystemConfig,
                 run: RunConfig | None = None) -> PeriodCurves:
    """Align and fuse partials per qOCV period and direction (system-level volts)."""
    run = run or RunConfig()
    q = run.qocv
    step = q.voltage_step_per_cell * config.cell_count_series
    wanted = ("charge", "discharge") if q.direction == "both" else (q.direction,)
    groups: dict[tuple[str, str], list[PartialQocvCurve]] = {}
    starts: dict[str, float] = {}
    for c in partials:
        if c.direction.value not in wanted:
            continue
        per = period_of(c.t_start, q.period)
        starts[per.label] = per.start
        groups.setdefault((per.label, c.direction.value), []).append(c)
    curves, aligns, skipped = {}, {}, {}
    for key in sorted(groups):
        group = sorted(groups[key], key=lambda c: (c.t_start, c.source_phase_id))
        res = align(group, step, q.align_tolerance_pp, q.align_max_iter, q.outlier_limit_pp)
        aligns[key] = res
        try:
            curve = fuse(res.partials, step, q.min_phases_per_point, q.min_phases_per_period,
                         period=key[0], direction=Direction(key[1]))
        except InsufficientPhases as exc:
            skipped[key] = f"InsufficientPhases: {exc}"
            continue
        curves[key] = replace(curve, meta={"alignment_iterations": res.iterations,
                                           "alignment_converged": res.converged,
                                           "dropped_outliers": len(res.dropped),
                                           "no_overlap": len(res.no_overlap)})
    return PeriodCurves(curves, aligns, skipped, starts)


@dataclass(frozen=True)
class FadeRow:
    period: str
    direction: str
    voltage_v: float
    fade_pp: float


def fade_table(pc: PeriodCurves, config: SystemConfig) -> list[FadeRow]:
    """Capacity fade of each period against the first one at the EOC voltage."""
    rows = []
    for direction in pc.directions():
        series = pc.series(direction)
        if len(series) < 2:
            continue
        v = fade_voltage([c for _, c in series], config.eoc_voltage)
        ref = series[0][1]
        for label, c in series:
            rows.append(FadeRow(label, direction, v, capacity_fade(ref, c, v)))
    return rows


# --------------------------------------------------------------------------
# IC / DV and FOI


@dataclass
class DiffSet:
    ic: dict[tuple[str, str], DiffCurve]
    dv: dict[tuple[str, str], DiffCurve]
    skipped: dict[tuple[str, str], str]


def differentiate(pc: PeriodCurves, config: SystemConfig, run: RunConfig | None = None) -> DiffSet:
    """Per-cell IC on the voltage grid and DV on a full-anchored SOC grid."""
    run = run or RunConfig()
    d = run.diff
    ic, dv, skipped = {}, {}, {}
    for key, curve in pc.curves.items():
        cell = curve.per_cell(config.cell_count_series)
        # the low end is a cell limit when partials reach it, the high end at EOC
        ends = (curve.soc_floor is None, curve.vmax < config.eoc_voltage - curve.voltage_step)
        try:
            ic[key] = replace(ica(smooth(cell, d.sigma_ic_per_cell), config.system_id), open_ends=ends)
            dv[key] = replace(dva(smooth(cell.to_soc_grid(d.dv_grid_step), d.sigma_dv_pct), config.system_id),
                              open_ends=ends)
        except (SigmaTooLarge, OcvTrackError, ValueError) as exc:
            skipped[key] = f"{type(exc).__name__}: {exc}"
    return DiffSet(ic, dv, skipped)


@dataclass
class FoiResult:
    tracks: dict[str, list[FoiTrack]]
    failed: dict[str, dict[str, str]]
    reports: dict[str, DmReport]
    catalog: list[FoiSpec]


def foi_analysis(pc: PeriodCurves, diffs: DiffSet, config: SystemConfig,
                 run: RunConfig | None = None) -> FoiResult:
    run = run or RunConfig()
    catalog = builtin_catalog(config.chemistry, run.foi.catalog_path)
    tracks, failed, reports = {}, {}, {}
    for direction in pc.directions():
        labels = [lab for lab, _ in pc.series(direction) if (lab, direction) in diffs.ic]
        if not labels:
            continue
        years = years_since([pc.period_start[lab] for lab in labels])
        ic = [PeriodCurve(lab, y, diffs.ic[(lab, direction)]) for lab, y in zip(labels, years)]
        dv = [PeriodCurve(lab, y, diffs.dv[(lab, direction)]) for lab, y in zip(labels, years)]
        tr, fl = track_all(catalog, ic, dv)
        tracks[direction] = tr
        failed[direction] = fl
        reports[direction] = attribute_dm(tr, catalog, run.foi.drift_floor_pp)
    return FoiResult(tracks, failed, reports, catalog)


def dcr_trends(yearly: Sequence[DcrTable], run: RunConfig | None = None) -> dict[tuple[float, float], DcrTrend | str]:
    """Trend per configured SOC range over yearly tables; values are trends or failure reasons."""
    run = run or RunConfig()
    out: dict[tuple[float, float], DcrTrend | str] = {}
    for rng in run.dcr.trend_soc_ranges:
        try:
            out[tuple(rng)] = fit_trend(yearly, tuple(rng), tuple(run.dcr.trend_temp_range))
        except (InsufficientYears, EmptyTable) as exc:
            out[tuple(rng)] = f"{type(exc).__name__}: {exc}"
    return out


def yearly_tables(tables: Sequence[DcrTable], run: RunConfig | None = None,
                  pulses: Sequence[DcrPulse] | None = None) -> list[DcrTable]:
    """One table per calendar year, rebuilt from the pulses when given."""
    run = run or RunConfig()
    if pulses is not None:
        by_year: dict[str, list[DcrPulse]] = {}
        periods: dict[str, Period] = {}
        for p in pulses:
            per = period_of(p.t_start, "year")
            periods[per.label] = per
            by_year.setdefault(per.label, []).append(p)
        out = []
        for lab in sorted(by_year):
            try:
                out.append(build_table(by_year[lab], periods[lab], run.dcr))
            except EmptyTable:
                continue
        return out
    if run.dcr.table_period == "year":
        return sorted(tables, key=lambda t: t.period.start)
    raise ValueError("monthly tables must be pooled from pulses; pass pulses=")


# --------------------------------------------------------------------------
# whole run


@dataclass
class PipelineResult:
    config: SystemConfig
    run: RunConfig
    scan: ScanResult
    curves: PeriodCurves
    fades: list[FadeRow]
    diffs: DiffSet
    foi: FoiResult
    yearly_tables: list[DcrTable]
    trends: dict[tuple[float, float], DcrTrend | str]
    correlations: dict[str, list[CorrelationResult]] = field(default_factory=dict)
    correlation_skipped: dict[str, dict[str, str]] = field(default_factory=dict)


def run_pipeline(stream: TelemetryStream | Iterable[TelemetryChunk], config: SystemConfig,
                 run: RunConfig | None = None, soh: dict[str, float] | None = None,
                 manual_anchors: Sequence[tuple[float, float]] = ()) -> PipelineResult:
    run = run or RunConfig()
    sc = scan(stream, config, run, manual_anchors)
    pc = build_curves(sc.partials, config, run)
    fades = fade_table(pc, config)
    diffs = differentiate(pc, config, run)
    foi = foi_analysis(pc, diffs, config, run)
    yearly = yearly_tables(sc.tables, run, sc.pulses)
    trends = dcr_trends(yearly, run)
    res = PipelineResult(config, run, sc, pc, fades, diffs, foi, yearly, trends)
    if soh:
        for direction, tracks in foi.tracks.items():
            res.correlations[direction], res.correlation_skipped[direction] = correlate_tracks(tracks, soh)
    return res
