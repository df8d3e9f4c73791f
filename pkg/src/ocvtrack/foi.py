"""Feature-of-interest catalogs, extremum location, drift tracking and
degradation-mode voting."""

from __future__ import annotations

import enum
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import Chemistry
from .diff import DiffCurve, DiffKind
from .errors import ConfigError, InsufficientObservations, NoExtremumFound, WindowOutOfDomain
from .fit import linear_fit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DM_NAMES = ("LLI", "LAM_NE", "LAM_PE")
# extrema this many smoothing sigmas from an open curve end are not trusted
EDGE_MARGIN_SIGMAS = 2.0


class FoiFeature(str, enum.Enum):
    PEAK_INTENSITY = "PeakIntensity"
    PEAK_POSITION = "PeakPosition"
    VALLEY_INTENSITY = "ValleyIntensity"
    VALLEY_POSITION = "ValleyPosition"
    PEAK_DISTANCE = "PeakDistance"

    @property
    def quantity(self) -> str:
        if self is FoiFeature.PEAK_DISTANCE:
            return "Dist"
        return "Int" if self.value.endswith("Intensity") else "Pos"

    @property
    def valley(self) -> bool:
        return self.value.startswith("Valley")


@dataclass(frozen=True)
class DmHypothesis:
    quantity: str
    sign: int
    dms: tuple[str, ...]


@dataclass(frozen=True)
class FoiSpec:
    foi_id: int
    chemistry: Chemistry
    curve_kind: DiffKind
    features: tuple[FoiFeature, ...]
    window: tuple[float, float]
    pair_window: tuple[float, float] | None = None
    dm_hypothesis: tuple[DmHypothesis, ...] = ()
    edge_allowed: bool = False
    low_confidence: bool = False

    def __post_init__(self) -> None:
        if not self.window[0] < self.window[1]:
            raise ConfigError(f"FOI {self.foi_id}: empty window {self.window}")
        dist = FoiFeature.PEAK_DISTANCE in self.features
        if dist and (self.pair_window is None or not self.pair_window[0] < self.pair_window[1]):
            raise ConfigError(f"FOI {self.foi_id}: PeakDistance needs a non-empty pair_window")
        valley = any(f.valley for f in self.features)
        peak = any(not f.valley for f in self.features)
        if valley and peak:
            raise ConfigError(f"FOI {self.foi_id}: mixes peak and valley features")
        for h in self.dm_hypothesis:
            if h.quantity not in self.quantities:
                raise ConfigError(f"FOI {self.foi_id}: hypothesis on untracked quantity {h.quantity}")
            if h.sign not in (-1, 1) or not set(h.dms) <= set(DM_NAMES):
                raise ConfigError(f"FOI {self.foi_id}: bad hypothesis {h}")

    @property
    def quantities(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(f.quantity for f in self.features))

    @property
    def label(self) -> str:
        return f"FOI{self.foi_id}"


_KIND = {"IC": DiffKind.IC, "DV": DiffKind.DV}


def _spec_from_dict(d: Mapping) -> FoiSpec:
    try:
        kind = _KIND[d["curve"]]
    except KeyError:
        raise ConfigError(f"FOI {d.get('id')}: curve must be IC or DV") from None
    hyps = tuple(DmHypothesis(h["quantity"], int(h["sign"]), tuple(h["dm"])) for h in d.get("hypotheses", ()))
    pw = d.get("pair_window")
    return FoiSpec(
        foi_id=int(d["id"]),
        chemistry=Chemistry.parse(d["chemistry"]),
        curve_kind=kind,
        features=tuple(FoiFeature(f) for f in d["features"]),
        window=(float(d["window"][0]), float(d["window"][1])),
        pair_window=None if pw is None else (float(pw[0]), float(pw[1])),
        dm_hypothesis=hyps,
        edge_allowed=bool(d.get("edge_allowed", False)),
        low_confidence=bool(d.get("low_confidence", False)),
    )


def load_catalog(path: str | Path | None = None) -> list[FoiSpec]:
    """All specs from a catalog file (the bundled one by default)."""
    if path is None:
        text = resources.files("ocvtrack").joinpath("data/foi_catalog.toml").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    if path is not None and str(path).lower().endswith(".json"):
        import json

        data = json.loads(text)
    else:
        data = tomllib.loads(text)
    return [_spec_from_dict(d) for d in data.get("foi", [])]


def builtin_catalog(chemistry: Chemistry | str, path: str | Path | None = None) -> list[FoiSpec]:
    chem = Chemistry.parse(chemistry)
    specs = [s for s in load_catalog(path) if s.chemistry is chem]
    return sorted(specs, key=lambda s: s.foi_id)


# ---------------------------------------------------------------- locate


@dataclass(frozen=True)
class Extremum:
    x: float
    y: float
    index: int
    refined: bool


def _candidates(y: np.ndarray, valley: bool) -> list[int]:
    """Interior strict local extrema; a flat top counts once, at its first index."""
    z = -y if valley else y
    out = []
    n = len(z)
    k = 1
    while k < n - 1:
        if z[k] > z[k - 1]:
            j = k
            while j + 1 < n and z[j + 1] == z[k]:
                j += 1
            if j + 1 < n and z[j + 1] < z[k]:
                out.append(k)
            k = j + 1
        else:
            k += 1
    return out


def find_extremum(x: np.ndarray, y: np.ndarray, window: tuple[float, float], valley: bool = False,
                  edge_allowed: bool = False, edge_margin: tuple[float, float] = (0.0, 0.0)) -> Extremum:
    """Largest peak (or deepest valley) inside ``window``.

    Interior candidates closer than ``edge_margin`` (low, high) to the ends
    of the curve are dropped: smoothing a curve cut off by missing data
    bends its last points into spurious extrema.
    """
    lo, hi = window
    if hi < x[0] or lo > x[-1]:
        raise WindowOutOfDomain(f"window [{lo}, {hi}] outside curve domain [{x[0]:.4g}, {x[-1]:.4g}]")
    inside = lambda k: lo <= x[k] <= hi  # noqa: E731
    away = lambda k: x[0] + edge_margin[0] <= x[k] <= x[-1] - edge_margin[1]  # noqa: E731
    cands = [k for k in _candidates(y, valley) if inside(k) and away(k)]
    if edge_allowed:
        cands += [k for k in (0, len(x) - 1) if inside(k)]
    if not cands:
        raise NoExtremumFound(f"no {'valley' if valley else 'peak'} in [{lo}, {hi}]")
    z = -y if valley else y
    best = min(cands, key=lambda k: (-z[k], x[k]))
    if 0 < best < len(x) - 1:
        a, b, c = z[best - 1], z[best], z[best + 1]
        den = a - 2 * b + c
        if den < 0:
            p = 0.5 * (a - c) / den
            h = 0.5 * (x[best + 1] - x[best - 1])
            zp = b - 0.25 * (a - c) * p
            return Extremum(float(x[best] + p * h), float(-zp if valley else zp), best, True)
    return Extremum(float(x[best]), float(y[best]), best, False)


@dataclass(frozen=True)
class FoiObservation:
    foi_id: int
    quantity: str
    period: str
    t_years: float
    raw: float
    normalized: float | None = None


def locate(spec: FoiSpec, curve: DiffCurve, period: str = "", t_years: float = 0.0) -> list[FoiObservation]:
    """Raw observations of every quantity the spec tracks on ``curve``."""
    if curve.kind is not spec.curve_kind:
        raise ValueError(f"{spec.label} needs a {spec.curve_kind.value} curve, got {curve.kind.value}")
    valley = any(f.valley for f in spec.features)
    margin = tuple(EDGE_MARGIN_SIGMAS * curve.smoothing_sigma if o else 0.0 for o in curve.open_ends)
    out: list[FoiObservation] = []
    if FoiFeature.PEAK_DISTANCE in spec.features:
        a = find_extremum(curve.x, curve.y, spec.window, False, spec.edge_allowed, margin)
        b = find_extremum(curve.x, curve.y, spec.pair_window, False, spec.edge_allowed, margin)
        out.append(FoiObservation(spec.foi_id, "Dist", period, t_years, abs(a.x - b.x)))
    others = [f for f in spec.features if f is not FoiFeature.PEAK_DISTANCE]
    if others:
        e = find_extremum(curve.x, curve.y, spec.window, valley, spec.edge_allowed, margin)
        for q in dict.fromkeys(f.quantity for f in others):
            out.append(FoiObservation(spec.foi_id, q, period, t_years, e.y if q == "Int" else e.x))
    return out


# ---------------------------------------------------------------- tracking


@dataclass(frozen=True)
class Reference:
    """Normalisation constants taken from the first period's curve."""

    highest_peak: float
    x_lo: float
    x_hi: float

    @classmethod
    def of(cls, curve: DiffCurve) -> "Reference":
        return cls(float(np.max(curve.y)), float(curve.x[0]), float(curve.x[-1]))

    def normalize(self, quantity: str, raw: float) -> float:
        if quantity == "Int":
            return raw / self.highest_peak * 100.0
        if quantity == "Pos":
            return (raw - self.x_lo) / (self.x_hi - self.x_lo) * 100.0
        return raw / (self.x_hi - self.x_lo) * 100.0


@dataclass(frozen=True)
class FoiTrack:
    spec: FoiSpec
    quantity: str
    observations: tuple[FoiObservation, ...]
    drift: float
    r2: float
    missing: tuple[str, ...] = ()

    @property
    def key(self) -> str:
        return f"{self.spec.foi_id}:{self.quantity}"

    def rows(self) -> list[tuple[str, str, str]]:
        return [(o.period, f"{o.raw:.6f}", f"{o.normalized:.6f}") for o in self.observations]


@dataclass(frozen=True)
class PeriodCurve:
    period: str
    t_years: float
    curve: DiffCurve


def track(spec: FoiSpec, curves: Sequence[PeriodCurve], reference: DiffCurve | None = None) -> list[FoiTrack]:
    """One track per quantity; drift is the LS slope of the normalised value in pp/a.

    ``reference`` defaults to the first period's curve.  Periods where the
    feature cannot be located are reported as missing, never filled in.
    """
    curves = sorted(curves, key=lambda c: c.t_years)
    if not curves:
        raise InsufficientObservations(f"{spec.label}: no curves")
    ref = Reference.of(reference if reference is not None else curves[0].curve)
    obs: dict[str, list[FoiObservation]] = {q: [] for q in spec.quantities}
    missing: list[str] = []
    for pc in curves:
        try:
            found = locate(spec, pc.curve, pc.period, pc.t_years)
        except (NoExtremumFound, WindowOutOfDomain):
            missing.append(pc.period)
            continue
        for o in found:
            obs[o.quantity].append(FoiObservation(o.foi_id, o.quantity, o.period, o.t_years, o.raw,
                                                  ref.normalize(o.quantity, o.raw)))
    tracks = []
    for q, series in obs.items():
        if len(series) < 2:
            raise InsufficientObservations(f"{spec.label} {q}: {len(series)} observation(s)")
        slope, _, r2 = linear_fit([o.t_years for o in series], [o.normalized for o in series])
        tracks.append(FoiTrack(spec, q, tuple(series), slope, r2, tuple(missing)))
    return tracks


def track_all(catalog: Sequence[FoiSpec], ic: Sequence[PeriodCurve], dv: Sequence[PeriodCurve]) -> tuple[list[FoiTrack], dict[str, str]]:
    """Track every spec; returns (tracks, {label: reason}) for specs that failed."""
    tracks, failed = [], {}
    for spec in catalog:
        curves = ic if spec.curve_kind is DiffKind.IC else dv
        try:
            tracks.extend(track(spec, curves))
        except InsufficientObservations as exc:
            failed[spec.label] = str(exc)
    return tracks, failed


# ---------------------------------------------------------------- DM voting


@dataclass(frozen=True)
class DmVerdict:
    dm: str
    verdict: str
    supporting: tuple[str, ...]
    contradicting: tuple[str, ...]

    def to_dict(self) -> dict:
        ids = lambda keys: sorted({int(k.split(":")[0]) for k in keys})  # noqa: E731
        return {"verdict": self.verdict, "supporting": ids(self.supporting),
                "contradicting": ids(self.contradicting),
                "supporting_tracks": list(self.supporting),
                "contradicting_tracks": list(self.contradicting)}


@dataclass(frozen=True)
class DmReport:
    verdicts: dict[str, DmVerdict] = field(default_factory=dict)
    drift_floor: float = 0.5

    def __getitem__(self, dm: str) -> DmVerdict:
        return self.verdicts[dm]

    def to_dict(self) -> dict:
        return {dm: v.to_dict() for dm, v in sorted(self.verdicts.items())}


def attribute_dm(tracks: Sequence[FoiTrack], catalog: Sequence[FoiSpec] | None = None,
                 drift_floor: float = 0.5) -> DmReport:
    """Qualitative vote of FOI drifts for each degradation mode.

    A track votes when its |drift| reaches ``drift_floor``: for every DM in a
    matching hypothesis it supports the DM if the drift sign agrees and
    contradicts it otherwise.  A DM is *dominant* with at least two
    supporting votes, more support than contradiction and strictly more
    support than any other DM; *possible* with any net support.
    """
    hyps: dict[tuple[int, str], tuple[DmHypothesis, ...]] = {}
    if catalog is not None:
        for spec in catalog:
            for h in spec.dm_hypothesis:
                hyps.setdefault((spec.foi_id, h.quantity), ())
                hyps[(spec.foi_id, h.quantity)] += (h,)
    sup: dict[str, list[str]] = {dm: [] for dm in DM_NAMES}
    con: dict[str, list[str]] = {dm: [] for dm in DM_NAMES}
    for tr in tracks:
        if abs(tr.drift) < drift_floor:
            continue
        hs = hyps.get((tr.spec.foi_id, tr.quantity))
        if hs is None:
            hs = tuple(h for h in tr.spec.dm_hypothesis if h.quantity == tr.quantity)
        for h in hs:
            agrees = np.sign(tr.drift) == h.sign
            for dm in h.dms:
                (sup if agrees else con)[dm].append(tr.key)
    verdicts = {}
    for dm in DM_NAMES:
        s, c = len(sup[dm]), len(con[dm])
        rivals = max(len(sup[o]) for o in DM_NAMES if o != dm)
        if s >= 2 and s > c and s > rivals:
            v = "dominant"
        elif s >= 1 and s > c:
            v = "possible"
        else:
            v = "not indicated"
        verdicts[dm] = DmVerdict(dm, v, tuple(sup[dm]), tuple(con[dm]))
    return DmReport(verdicts, drift_floor)
