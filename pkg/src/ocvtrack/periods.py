"""Calendar periods (UTC years and months) used to group tables and curves."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

SECONDS_PER_YEAR = 365.25 * 86400.0


@dataclass(frozen=True, order=True)
class Period:
    start: float
    end: float
    label: str

    def contains(self, t: float) -> bool:
        return self.start <= t < self.end

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.start + self.end)

    def to_dict(self) -> dict:
        return {"label": self.label, "start": self.start, "end": self.end}


def _epoch(y: int, m: int) -> float:
    return datetime(y, m, 1, tzinfo=timezone.utc).timestamp()


def period_of(t: float, kind: str) -> Period:
    d = datetime.fromtimestamp(float(t), tz=timezone.utc)
    if kind == "year":
        return Period(_epoch(d.year, 1), _epoch(d.year + 1, 1), f"{d.year:04d}")
    if kind == "month":
        ny, nm = (d.year + 1, 1) if d.month == 12 else (d.year, d.month + 1)
        return Period(_epoch(d.year, d.month), _epoch(ny, nm), f"{d.year:04d}-{d.month:02d}")
    raise ValueError(f"unknown period kind {kind!r}")


def period_index(t: np.ndarray, kind: str) -> np.ndarray:
    """Integer period key per timestamp: calendar year, or months since 1970-01."""
    dt = np.asarray(t, dtype=np.float64).astype("datetime64[s]")
    years = dt.astype("datetime64[Y]").astype(np.int64) + 1970
    if kind == "year":
        return years
    months = dt.astype("datetime64[M]").astype(np.int64)
    return months


def years_since(times: list[float] | np.ndarray) -> list[float]:
    """Elapsed years from the first timestamp.

    Values within 0.01 a of a whole number are snapped to it, so calendar
    years one leap day apart still sit exactly one year apart.
    """
    t0 = float(times[0])
    out = []
    for t in times:
        y = (float(t) - t0) / SECONDS_PER_YEAR
        out.append(float(round(y)) if abs(y - round(y)) < 0.01 else y)
    return out
