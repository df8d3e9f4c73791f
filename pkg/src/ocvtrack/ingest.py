"""Telemetry ingestion and coulomb-counting state of charge.

Telemetry is handled as a stream of column chunks (:class:`TelemetryChunk`)
so that a full system-year at 1 Hz never has to sit in memory.  Record-level
iteration (:meth:`TelemetryStream.records`) exists for small files and tests.

Sign convention: current > 0 means charging.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from .config import IngestSettings, SocSettings, SystemConfig
from .errors import HeaderError, IngestError, NonMonotonicTimestamp

log = logging.getLogger(__name__)

HEADER = ("timestamp", "voltage_v", "current_a", "power_w", "temperature_c")
TEMP_RANGE = (-40.0, 80.0)


@dataclass(frozen=True)
class TelemetryRecord:
    timestamp: datetime
    voltage: float
    current: float
    power: float
    temperature: float


@dataclass(frozen=True)
class GapMarker:
    before: float
    after: float

    @property
    def duration(self) -> float:
        return self.after - self.before


@dataclass(frozen=True, eq=False)
class TelemetryChunk:
    """Column arrays for a contiguous slice of the stream.

    ``gap_before[k]`` is True when sample ``k`` follows a gap longer than
    the gap threshold (the first sample of a stream never carries a gap).
    """

    t: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    power: np.ndarray
    temperature: np.ndarray
    gap_before: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def slice(self, lo: int, hi: int) -> "TelemetryChunk":
        return TelemetryChunk(
            self.t[lo:hi], self.voltage[lo:hi], self.current[lo:hi],
            self.power[lo:hi], self.temperature[lo:hi], self.gap_before[lo:hi],
        )

    @staticmethod
    def concat(chunks: Sequence["TelemetryChunk"]) -> "TelemetryChunk":
        if not chunks:
            e = np.empty(0)
            return TelemetryChunk(e, e, e, e, e, np.empty(0, bool))
        return TelemetryChunk(*(np.concatenate([getattr(c, n) for c in chunks]) for n in _COLUMNS))


_COLUMNS = ("t", "voltage", "current", "power", "temperature", "gap_before")


@dataclass
class IngestStats:
    rows_read: int = 0
    records: int = 0
    malformed: int = 0
    malformed_lines: list[int] = field(default_factory=list)
    reordered: int = 0
    rejected_nonmonotonic: int = 0
    gaps: list[GapMarker] = field(default_factory=list)
    power_abs_mismatch_sum: float = 0.0
    power_abs_sum: float = 0.0

    MAX_LISTED_LINES = 1000

    @property
    def power_consistency(self) -> float:
        """Mean |P - V*I| relative to mean |P|; 0 is a perfect match."""
        if self.power_abs_sum == 0:
            return 0.0
        return self.power_abs_mismatch_sum / self.power_abs_sum

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "records": self.records,
            "malformed": self.malformed,
            "malformed_lines": self.malformed_lines[: self.MAX_LISTED_LINES],
            "reordered": self.reordered,
            "rejected_nonmonotonic": self.rejected_nonmonotonic,
            "gap_count": len(self.gaps),
            "gap_seconds": float(sum(g.duration for g in self.gaps)),
            "power_consistency": self.power_consistency,
        }


class _Orderer:
    """Sorts out small timestamp jitter across chunk boundaries.

    Rows arriving up to ``jitter`` seconds late are reinserted; later or
    duplicate rows are rejected.  Rows newer than ``max_t - jitter`` are held
    back until the next chunk (or :meth:`flush`) because they could still be
    overtaken.
    """

    def __init__(self, settings: IngestSettings, stats: IngestStats) -> None:
        self.jitter = settings.jitter_window_s
        self.gap = settings.gap_threshold_s
        self.max_frac = settings.max_nonmonotonic_fraction
        self.stats = stats
        self._held: list[np.ndarray] | None = None
        self._last_t = -np.inf

    def push(self, cols: list[np.ndarray]) -> TelemetryChunk | None:
        if self._held is not None:
            cols = [np.concatenate([h, c]) for h, c in zip(self._held, cols)]
            self._held = None
        t = cols[0]
        if len(t) == 0:
            return None
        prev_max = np.maximum.accumulate(np.concatenate([[self._last_t], t]))[:-1]
        late = t <= prev_max
        if late.any():
            lag = prev_max - t
            reject = late & ((lag > self.jitter) | (t <= self._last_t))
            keep = ~reject
            self.stats.rejected_nonmonotonic += int(reject.sum())
            cols = [c[keep] for c in cols]
            t = cols[0]
            order = np.argsort(t, kind="stable")
            self.stats.reordered += int((order != np.arange(len(order))).sum())
            cols = [c[order] for c in cols]
            t = cols[0]
            dup = np.zeros(len(t), bool)
            dup[1:] = t[1:] == t[:-1]
            if dup.any():
                self.stats.rejected_nonmonotonic += int(dup.sum())
                cols = [c[~dup] for c in cols]
                t = cols[0]
        self._check_fraction()
        if len(t) == 0:
            return None
        cut = int(np.searchsorted(t, t[-1] - self.jitter, side="left"))
        self._held = [c[cut:] for c in cols]
        return self._emit([c[:cut] for c in cols])

    def flush(self) -> TelemetryChunk | None:
        if self._held is None:
            return None
        cols, self._held = self._held, None
        return self._emit(cols)

    def _check_fraction(self) -> None:
        total = max(self.stats.rows_read, 1)
        if self.stats.rejected_nonmonotonic / total > self.max_frac:
            raise NonMonotonicTimestamp(
                f"{self.stats.rejected_nonmonotonic} of {total} rows out of order "
                f"(limit {self.max_frac:.3%})"
            )

    def _emit(self, cols: list[np.ndarray]) -> TelemetryChunk | None:
        t = cols[0]
        if len(t) == 0:
            return None
        dt = np.diff(np.concatenate([[self._last_t], t]))
        gap = dt > self.gap
        if not np.isfinite(self._last_t):
            gap[0] = False
        for k in np.flatnonzero(gap):
            before = self._last_t if k == 0 else t[k - 1]
            self.stats.gaps.append(GapMarker(float(before), float(t[k])))
        self._last_t = float(t[-1])
        self.stats.records += len(t)
        return TelemetryChunk(cols[0], cols[1], cols[2], cols[3], cols[4], gap)


_BAD_LINE = re.compile(r"line (\d+)")


def _check_header(path: Path) -> None:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip().lstrip("﻿")
    cols = tuple(c.strip() for c in first.split(","))
    if cols != HEADER:
        raise HeaderError(f"{path}: expected header {','.join(HEADER)}, got {first!r}")


def _first_timestamp(path: Path) -> float:
    df = pd.read_csv(path, nrows=1, usecols=["timestamp"])
    if df.empty:
        return np.inf
    return float(_parse_time(df["timestamp"], _detect_format(df["timestamp"]))[0])


def _detect_format(col: pd.Series) -> str:
    if pd.api.types.is_numeric_dtype(col):
        return "epoch"
    sample = str(col.iloc[0]).strip()
    try:
        float(sample)
        return "epoch"
    except ValueError:
        return "rfc3339"


def _parse_time(col: pd.Series, fmt: str) -> np.ndarray:
    if fmt == "epoch":
        if pd.api.types.is_numeric_dtype(col):
            return col.to_numpy(dtype=np.float64)
        return pd.to_numeric(col, errors="coerce").to_numpy(dtype=np.float64)
    ts = pd.to_datetime(col.astype(str), utc=True, format="ISO8601", errors="coerce")
    out = ts.to_numpy(dtype="datetime64[ns]").astype(np.int64).astype(np.float64) / 1e9
    out[ts.isna().to_numpy()] = np.nan
    return out


def _numeric(col: pd.Series) -> np.ndarray:
    if pd.api.types.is_numeric_dtype(col):
        return col.to_numpy(dtype=np.float64)
    return pd.to_numeric(col, errors="coerce").to_numpy(dtype=np.float64)


class TelemetryStream:
    """Re-iterable stream of :class:`TelemetryChunk` objects.

    Each iteration re-reads the source and resets :attr:`stats`.
    """

    def __init__(self, factory: Callable[[IngestStats], Iterator[list[np.ndarray]]],
                 settings: IngestSettings, sources: Sequence[str] = ()) -> None:
        self._factory = factory
        self.settings = settings
        self.sources = list(sources)
        self.stats = IngestStats()

    def __iter__(self) -> Iterator[TelemetryChunk]:
        self.stats = IngestStats()
        orderer = _Orderer(self.settings, self.stats)
        for cols in self._factory(self.stats):
            out = orderer.push(cols)
            if out is not None:
                yield out
        out = orderer.flush()
        if out is not None:
            yield out

    def records(self) -> Iterator[TelemetryRecord | GapMarker]:
        for chunk in self:
            for k in range(len(chunk)):
                if chunk.gap_before[k]:
                    before = float(chunk.t[k - 1]) if k else None
                    if before is None:
                        before = next(g.before for g in reversed(self.stats.gaps) if g.after == chunk.t[k])
                    yield GapMarker(before, float(chunk.t[k]))
                yield TelemetryRecord(
                    datetime.fromtimestamp(float(chunk.t[k]), tz=timezone.utc),
                    float(chunk.voltage[k]), float(chunk.current[k]),
                    float(chunk.power[k]), float(chunk.temperature[k]),
                )

    def materialize(self) -> TelemetryChunk:
        return TelemetryChunk.concat(list(self))

    @classmethod
    def from_arrays(cls, t, voltage, current, power=None, temperature=None,
                    settings: IngestSettings | None = None) -> "TelemetryStream":
        """Wrap in-memory arrays (e.g. simulator output) as a stream."""
        settings = settings or IngestSettings()
        t = np.asarray(t, dtype=np.float64)
        v = np.asarray(voltage, dtype=np.float64)
        i = np.asarray(current, dtype=np.float64)
        p = v * i if power is None else np.asarray(power, dtype=np.float64)
        temp = np.full_like(t, 25.0) if temperature is None else np.asarray(temperature, dtype=np.float64)
        step = settings.chunk_rows

        def factory(stats: IngestStats) -> Iterator[list[np.ndarray]]:
            for lo in range(0, len(t), step):
                hi = lo + step
                cols = [t[lo:hi], v[lo:hi], i[lo:hi], p[lo:hi], temp[lo:hi]]
                stats.rows_read += len(cols[0])
                yield _validate(cols, stats, lambda k, lo=lo: k + lo + 2)

        return cls(factory, settings, ["<memory>"])


def _validate(cols: list[np.ndarray], stats: IngestStats,
              line_of: Callable[[np.ndarray], np.ndarray]) -> list[np.ndarray]:
    t, v, i, p, temp = cols
    ok = np.isfinite(t) & np.isfinite(v) & np.isfinite(i) & np.isfinite(p) & np.isfinite(temp)
    ok &= v > 0
    ok &= (temp >= TEMP_RANGE[0]) & (temp <= TEMP_RANGE[1])
    if not ok.all():
        bad = np.flatnonzero(~ok)
        stats.malformed += len(bad)
        room = IngestStats.MAX_LISTED_LINES - len(stats.malformed_lines)
        if room > 0:
            stats.malformed_lines.extend(int(x) for x in line_of(bad[:room]))
        cols = [c[ok] for c in cols]
    t, v, i, p, _ = cols
    stats.power_abs_mismatch_sum += float(np.abs(p - v * i).sum())
    stats.power_abs_sum += float(np.abs(p).sum())
    return cols


def _line_mapper(row0: int, skipped: list[int]) -> Callable[[np.ndarray], np.ndarray]:
    """Map chunk-relative row indices to 1-based file line numbers."""

    def line_of(k: np.ndarray) -> np.ndarray:
        lines = np.asarray(k, dtype=np.int64) + row0 + 2
        for s in sorted(skipped):
            lines[lines >= s] += 1
        return lines

    return line_of


def _csv_chunks(paths: Sequence[Path], settings: IngestSettings,
                stats: IngestStats) -> Iterator[list[np.ndarray]]:
    for path in paths:
        fmt = None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            reader = pd.read_csv(
                path, header=0, chunksize=settings.chunk_rows,
                engine="c", on_bad_lines="warn", skip_blank_lines=True,
            )
            skipped: list[int] = []
            for df in reader:
                for w in caught:
                    m = _BAD_LINE.search(str(w.message))
                    stats.malformed += 1
                    stats.rows_read += 1
                    if m:
                        skipped.append(int(m.group(1)))
                        if len(stats.malformed_lines) < IngestStats.MAX_LISTED_LINES:
                            stats.malformed_lines.append(int(m.group(1)))
                caught.clear()
                if df.empty:
                    continue
                if fmt is None:
                    fmt = _detect_format(df["timestamp"])
                stats.rows_read += len(df)
                cols = [
                    _parse_time(df["timestamp"], fmt),
                    _numeric(df["voltage_v"]),
                    _numeric(df["current_a"]),
                    _numeric(df["power_w"]),
                    _numeric(df["temperature_c"]),
                ]
                yield _validate(cols, stats, _line_mapper(int(df.index[0]), skipped))


def read_stream(path: str | Path | Sequence[str | Path],
                config: SystemConfig | None = None,
                settings: IngestSettings | None = None) -> TelemetryStream:
    """Open one or more telemetry CSV files as a :class:`TelemetryStream`.

    Files are checked for the exact header up front and concatenated in the
    order of their first timestamp.  ``config`` is accepted for symmetry with
    the other stages; ingestion itself is chemistry-agnostic.
    """
    settings = settings or IngestSettings()
    raw = [path] if isinstance(path, (str, Path)) else list(path)
    paths = [Path(p) for p in raw]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(p)
        _check_header(p)
    if len(paths) > 1:
        paths.sort(key=_first_timestamp)

    def factory(stats: IngestStats) -> Iterator[list[np.ndarray]]:
        return _csv_chunks(paths, settings, stats)

    return TelemetryStream(factory, settings, [str(p) for p in paths])


# --------------------------------------------------------------------------
# state of charge


@dataclass(frozen=True)
class Anchor:
    t: float
    kind: str  # "FullChargeAnchor" | "ManualAnchor"
    soc_before: float
    soc_after: float


@dataclass(frozen=True, eq=False)
class SocSeries:
    t: np.ndarray
    soc: np.ndarray
    anchors: tuple[Anchor, ...]
    reference_capacity: float
    anchored: bool
    clamp_count: int
    anchor_drifts: tuple[float, ...]
    charge_to_first_anchor_ah: float | None

    @property
    def confidence(self) -> str:
        return "normal" if self.anchored else "low"


class SocCounter:
    """Incremental trapezoidal coulomb counter with full-charge anchoring.

    SOC(t) = SOC(t0) + integral(I dt) / capacity * 100.  Charge is not
    integrated across telemetry gaps.  A full-charge anchor fires once per
    qualifying run, at the first sample where ``V >= eoc`` and
    ``|I| <= taper`` have held for ``anchor_hold_s``; SOC is then reset to
    100 %.  Reported SOC is clamped to ``[clamp_low, clamp_high]`` while the
    internal integrator is left untouched.
    """

    def __init__(self, config: SystemConfig, settings: SocSettings | None = None,
                 manual_anchors: Sequence[tuple[float, float]] = ()) -> None:
        settings = settings or SocSettings()
        self.config = config
        self.settings = settings
        self.capacity = settings.reference_capacity or config.nominal_capacity
        if not self.capacity > 0:
            raise IngestError("reference capacity must be positive")
        self.initial_soc = 50.0 if settings.initial_soc is None else float(settings.initial_soc)
        self._manual = sorted((float(t), float(s)) for t, s in manual_anchors)
        self._soc = self.initial_soc
        self._t_last = np.nan
        self._i_last = 0.0
        self._run_active = False
        self._run_start = np.nan
        self._run_done = False
        self._charge_total = 0.0
        self.anchors: list[Anchor] = []
        self.clamp_count = 0
        self.charge_to_first_anchor_ah: float | None = None

    def update(self, chunk: TelemetryChunk) -> np.ndarray:
        n = len(chunk)
        if n == 0:
            return np.empty(0)
        t, i, v, gap = chunk.t, chunk.current, chunk.voltage, chunk.gap_before
        t_prev = np.concatenate([[self._t_last], t[:-1]])
        i_prev = np.concatenate([[self._i_last], i[:-1]])
        dt = t - t_prev
        dq = 0.5 * (i_prev + i) * dt / 3600.0
        dq[gap | ~np.isfinite(dq)] = 0.0
        ds = dq * (100.0 / self.capacity)
        raw = self._soc + np.cumsum(ds)
        charge = self._charge_total + np.cumsum(dq)

        idx, values, kinds = self._anchor_points(t, v, i, gap)
        soc = raw
        if len(idx):
            seg = np.searchsorted(idx, np.arange(n), side="right") - 1
            has = seg >= 0
            base = values[seg[has]] - raw[idx[seg[has]]]
            soc = raw.copy()
            soc[has] = raw[has] + base
            for j, k in enumerate(idx):
                before = raw[k] if j == 0 else raw[k] + (values[j - 1] - raw[idx[j - 1]])
                self.anchors.append(Anchor(float(t[k]), kinds[j], float(before), float(values[j])))
                if self.charge_to_first_anchor_ah is None:
                    self.charge_to_first_anchor_ah = float(charge[k])
        self._soc = float(soc[-1])
        self._t_last = float(t[-1])
        self._i_last = float(i[-1])
        self._charge_total = float(charge[-1])

        lo, hi = self.settings.clamp_low, self.settings.clamp_high
        out_of_range = (soc < lo) | (soc > hi)
        if out_of_range.any():
            self.clamp_count += int(out_of_range.sum())
            soc = np.clip(soc, lo, hi)
        return soc

    def _anchor_points(self, t, v, i, gap):
        cfg = self.config
        cond = (v >= cfg.eoc_voltage) & (np.abs(i) <= cfg.eoc_taper_current)
        n = len(t)
        prev = np.concatenate([[self._run_active], cond[:-1]])
        start = cond & (~prev | gap)
        run_id = np.cumsum(start)  # 0 => run continuing from previous chunk
        first_idx = np.where(start, np.arange(n), -1)
        first_idx = np.maximum.accumulate(first_idx)
        start_t = np.where(first_idx >= 0, t[np.maximum(first_idx, 0)], self._run_start)
        qualifies = cond & (t - start_t >= self.settings.anchor_hold_s)
        cand = np.flatnonzero(qualifies)
        auto: list[int] = []
        if len(cand):
            ids, first = np.unique(run_id[cand], return_index=True)
            for rid, f in zip(ids, first):
                if rid == 0 and self._run_done:
                    continue
                auto.append(int(cand[f]))
        # carry run state
        if cond[-1]:
            last_rid = run_id[-1]
            self._run_active = True
            self._run_start = float(start_t[-1])
            done_in_chunk = any(run_id[k] == last_rid for k in auto)
            self._run_done = done_in_chunk or (last_rid == 0 and self._run_done)
        else:
            self._run_active = False
            self._run_done = False

        points = [(k, 100.0, "FullChargeAnchor") for k in auto]
        while self._manual and self._manual[0][0] <= t[-1]:
            ta, sa = self._manual.pop(0)
            k = int(np.searchsorted(t, ta, side="left"))
            points.append((k, sa, "ManualAnchor"))
        points.sort(key=lambda p: p[0])
        idx = np.array([p[0] for p in points], dtype=np.int64)
        values = np.array([p[1] for p in points], dtype=np.float64)
        kinds = [p[2] for p in points]
        return idx, values, kinds

    @property
    def anchor_drifts(self) -> list[float]:
        full = [a for a in self.anchors if a.kind == "FullChargeAnchor"]
        return [a.soc_before - a.soc_after for a in full[1:]]

    def initial_soc_estimate(self) -> float | None:
        """Starting SOC implied by the first full-charge anchor, if any."""
        if self.charge_to_first_anchor_ah is None:
            return None
        first = self.anchors[0]
        return first.soc_after - self.charge_to_first_anchor_ah * 100.0 / self.capacity


def compute_soc(stream: Iterable[TelemetryChunk], config: SystemConfig,
                settings: SocSettings | None = None,
                manual_anchors: Sequence[tuple[float, float]] = ()) -> SocSeries:
    """Materialized SOC for a whole stream (use :class:`SocCounter` for big data)."""
    counter = SocCounter(config, settings, manual_anchors)
    ts, socs = [], []
    for chunk in stream:
        socs.append(counter.update(chunk))
        ts.append(chunk.t)
    if not ts:
        raise IngestError("empty telemetry stream")
    anchored = any(a.kind == "FullChargeAnchor" for a in counter.anchors) or bool(counter.anchors)
    if not anchored:
        log.warning("no full-charge anchor found; SOC starts from %.1f %% and is low confidence",
                    counter.initial_soc)
    return SocSeries(
        t=np.concatenate(ts),
        soc=np.concatenate(socs),
        anchors=tuple(counter.anchors),
        reference_capacity=counter.capacity,
        anchored=anchored,
        clamp_count=counter.clamp_count,
        anchor_drifts=tuple(counter.anchor_drifts),
        charge_to_first_anchor_ah=counter.charge_to_first_anchor_ah,
    )
