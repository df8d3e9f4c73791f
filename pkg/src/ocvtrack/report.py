"""Artifact files for each stage plus the run manifest.

All writers are deterministic: JSON with sorted keys, CSV with fixed float
formatting, and no wall-clock timestamps anywhere.
"""

from __future__ import annotations

import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, SystemConfig
from .dcr import DcrTable, DcrTrend
from .diff import DiffCurve
from .io import sha256_file, write_csv, write_json
from .ingest import IngestStats
from .phases import PhaseAudit
from .pipeline import DiffSet, FadeRow, FoiResult, PeriodCurves, PipelineResult, ScanResult
from .stats import CorrelationResult

MANIFEST = "manifest.json"


@dataclass
class Report:
    """Collects written artifacts for the manifest."""

    out: Path
    artifacts: list[Path] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def json(self, name: str, obj: Any) -> Path:
        p = write_json(self.path(name), obj)
        self.artifacts.append(p)
        return p

    def csv(self, name: str, header: Sequence[str], rows) -> Path:
        p = write_csv(self.path(name), header, rows)
        self.artifacts.append(p)
        return p

    def add(self, p: Path) -> None:
        self.artifacts.append(Path(p))

    def manifest(self, stage: str, inputs: Sequence[Path], run: RunConfig,
                 counts: dict, extra: dict | None = None) -> Path:
        body = {
            "tool": "ocvtrack",
            "version": __version__,
            "python": platform.python_version(),
            "stage": stage,
            "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in inputs],
            "config_sha256": run.digest(),
            "config": run.to_dict(),
            "counts": counts,
            "artifacts": [{"path": str(p.relative_to(self.out)), "sha256": sha256_file(p)}
                          for p in sorted(set(self.artifacts))],
        }
        if extra:
            body.update(extra)
        return write_json(self.out / MANIFEST, body)


def _f(x: float, nd: int = 6) -> str:
    return "" if x is None or not np.isfinite(x) else f"{x:.{nd}f}"


# --------------------------------------------------------------------------
# stage writers


def write_ingest(rep: Report, stats: IngestStats, soc: dict | None = None) -> None:
    body = {"ingest": stats.to_dict()}
    if soc is not None:
        body["soc"] = soc
    rep.json("ingest_stats.json", body)


def write_dcr(rep: Report, tables: Sequence[DcrTable], yearly: Sequence[DcrTable],
              trends: dict[tuple[float, float], DcrTrend | str]) -> None:
    for tb in tables:
        rep.json(f"dcr/table_{tb.period.label}.json", tb.to_dict())
    for tb in yearly:
        rep.json(f"dcr/table_year_{tb.period.label}.json", tb.to_dict())
    problems = {}
    for (lo, hi), tr in sorted(trends.items()):
        name = f"dcr/trend_soc{lo:g}-{hi:g}.csv"
        if isinstance(tr, str):
            problems[f"{lo:g}-{hi:g}"] = tr
            continue
        rep.csv(name, ("year", "relative_dcr_pct"), tr.to_rows())
    if problems:
        rep.json("dcr/trend_skipped.json", problems)


def write_phase_audit(rep: Report, audit: Sequence[PhaseAudit]) -> None:
    rows = sorted(audit, key=lambda a: (a.start, a.phase_id, a.reason))
    rep.csv("phase_audit.csv", PhaseAudit.HEADER, [a.row() for a in rows])


def curve_name(system: str, period: str, direction: str) -> str:
    return f"{system}_{period}_{direction}"


def write_curves(rep: Report, pc: PeriodCurves, config: SystemConfig, fades: Sequence[FadeRow]) -> None:
    for (period, direction), c in sorted(pc.curves.items()):
        name = curve_name(config.system_id, period, direction)
        rows = [(_f(v, 4), _f(s), str(int(n)), _f(sd)) for v, s, n, sd in
                zip(c.voltage, c.mean_soc, c.n_contributing, c.soc_std)]
        rep.csv(f"qocv/{name}.csv", ("voltage_v", "mean_soc_pct", "n", "soc_std_pp"), rows)
        rep.json(f"qocv/{name}.json", {**c.to_dict(), "system": config.system_id,
                                       "cells_series": config.cell_count_series})
    if pc.skipped:
        rep.json("qocv/skipped.json", {f"{p}_{d}": r for (p, d), r in sorted(pc.skipped.items())})
    rep.csv("capacity_fade.csv", ("period", "direction", "voltage_v", "fade_pp"),
            [(f.period, f.direction, _f(f.voltage_v, 4), _f(f.fade_pp)) for f in fades])


def _write_diff(rep: Report, folder: str, curves: dict[tuple[str, str], DiffCurve], system: str) -> None:
    for (period, direction), d in sorted(curves.items()):
        name = curve_name(system, period, direction)
        rep.csv(f"{folder}/{name}.csv", ("x", "y"), [(_f(x, 6), _f(y, 9)) for x, y in zip(d.x, d.y)])
        rep.json(f"{folder}/{name}.json", {**d.to_dict(),
                                           "x_unit": "V per cell" if folder == "ic" else "% SOC (full = 100)",
                                           "y_unit": "% per V" if folder == "ic" else "V per %"})


def write_diffs(rep: Report, diffs: DiffSet, config: SystemConfig) -> None:
    _write_diff(rep, "ic", diffs.ic, config.system_id)
    _write_diff(rep, "dv", diffs.dv, config.system_id)
    if diffs.skipped:
        rep.json("diff_skipped.json", {f"{p}_{d}": r for (p, d), r in sorted(diffs.skipped.items())})


def write_foi(rep: Report, foi: FoiResult) -> None:
    for direction, tracks in sorted(foi.tracks.items()):
        summary = []
        for tr in tracks:
            rep.csv(f"foi/{direction}_foi{tr.spec.foi_id}_{tr.quantity}.csv",
                    ("period", "raw", "normalized"), tr.rows())
            summary.append((str(tr.spec.foi_id), tr.quantity, tr.spec.curve_kind.name,
                            _f(tr.drift), _f(tr.r2), ";".join(tr.missing)))
        rep.csv(f"foi/{direction}_summary.csv",
                ("foi", "quantity", "curve", "drift_pp_per_year", "r2", "missing_periods"), summary)
        rep.json(f"dm_report_{direction}.json", foi.reports[direction].to_dict())
        if foi.failed.get(direction):
            rep.json(f"foi/{direction}_failed.json", foi.failed[direction])


def write_correlations(rep: Report, results: dict[str, list[CorrelationResult]],
                       skipped: dict[str, dict[str, str]]) -> None:
    for direction, res in sorted(results.items()):
        rep.csv(f"correlation_{direction}.csv", CorrelationResult.HEADER, [r.row() for r in res])
        if skipped.get(direction):
            rep.json(f"correlation_{direction}_skipped.json", skipped[direction])


def write_scan(rep: Report, sc: ScanResult) -> None:
    write_ingest(rep, sc.stats, sc.soc.to_dict())
    write_phase_audit(rep, sc.audit)


def write_all(rep: Report, res: PipelineResult) -> None:
    write_scan(rep, res.scan)
    write_dcr(rep, res.scan.tables, res.yearly_tables, res.trends)
    write_curves(rep, res.curves, res.config, res.fades)
    write_diffs(rep, res.diffs, res.config)
    write_foi(rep, res.foi)
    if res.correlations:
        write_correlations(rep, res.correlations, res.correlation_skipped)
