"""System metadata and run configuration.

Every threshold used by the pipeline lives here with its default, so a run
is fully described by a :class:`RunConfig` (see :meth:`RunConfig.digest`).
TOML and JSON files with the same structure are interchangeable.
"""

from __future__ import annotations

import enum
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class Chemistry(str, enum.Enum):
    LMO_NMC_BLEND = "LmoNmcBlend"
    NMC = "Nmc"
    LFP = "Lfp"

    @classmethod
    def parse(cls, value: "str | Chemistry") -> "Chemistry":
        if isinstance(value, Chemistry):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "").replace("/", "")
        aliases = {
            "lmonmcblend": cls.LMO_NMC_BLEND,
            "lmonmc": cls.LMO_NMC_BLEND,
            "lmo": cls.LMO_NMC_BLEND,
            "smalllmo": cls.LMO_NMC_BLEND,
            "nmc": cls.NMC,
            "mediumnmc": cls.NMC,
            "lfp": cls.LFP,
            "mediumlfp": cls.LFP,
        }
        try:
            return aliases[key]
        except KeyError:
            from .errors import UnknownChemistry

            raise UnknownChemistry(f"unknown chemistry {value!r}") from None


@dataclass(frozen=True)
class SystemConfig:
    """Static description of one home storage system.

    Voltages are system level (battery terminals). ``eod_voltage`` is a
    list of ``(valid_from_epoch_s, volts)`` pairs because the BMS may move
    the end-of-discharge limit during the lifetime.
    """

    system_id: str
    chemistry: Chemistry
    nominal_capacity: float
    nominal_voltage: float
    cell_count_series: int
    eoc_voltage: float
    eoc_taper_current: float
    eod_voltage: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "chemistry", Chemistry.parse(self.chemistry))
        if isinstance(self.eod_voltage, (int, float)):
            object.__setattr__(self, "eod_voltage", ((0.0, float(self.eod_voltage)),))
        else:
            eod = tuple(sorted((float(t), float(v)) for t, v in self.eod_voltage))
            object.__setattr__(self, "eod_voltage", eod)
        if self.nominal_capacity <= 0:
            raise ConfigError("nominal_capacity must be positive")
        if self.cell_count_series < 1:
            raise ConfigError("cell_count_series must be >= 1")
        if not self.eod_voltage:
            raise ConfigError("at least one eod_voltage epoch is required")
        for _, v in self.eod_voltage:
            if not self.eoc_voltage > v:
                raise ConfigError(f"eoc_voltage {self.eoc_voltage} must exceed eod_voltage {v}")
        if self.eoc_taper_current <= 0:
            raise ConfigError("eoc_taper_current must be positive")

    @property
    def one_c_current(self) -> float:
        """1C current in amperes (nominal capacity over one hour)."""
        return self.nominal_capacity

    def eod_at(self, t: float) -> float:
        v = self.eod_voltage[0][1]
        for start, volts in self.eod_voltage:
            if t >= start:
                v = volts
        return v

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["chemistry"] = self.chemistry.value
        d["eod_voltage"] = [list(x) for x in self.eod_voltage]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SystemConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown system keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass(frozen=True)
class IngestSettings:
    gap_threshold_s: float = 5.0
    jitter_window_s: float = 2.0
    max_nonmonotonic_fraction: float = 0.001
    chunk_rows: int = 1_000_000


@dataclass(frozen=True)
class SocSettings:
    anchor_hold_s: float = 60.0
    clamp_low: float = -5.0
    clamp_high: float = 105.0
    initial_soc: float | None = None
    reference_capacity: float | None = None


@dataclass(frozen=True)
class DcrSettings:
    min_delta_c: float = 0.5
    hold_tolerance: float = 0.10
    hold_min_s: float = 2.0
    pulse_max_s: float = 10.0
    step_max_s: float = 2.0
    soc_edges: tuple[float, ...] = tuple(float(x) for x in range(0, 101, 10))
    temp_edges: tuple[float, ...] = tuple(float(x) for x in range(0, 41, 5))
    min_samples: int = 5
    table_period: str = "month"
    trend_temp_range: tuple[float, float] = (20.0, 25.0)
    trend_soc_ranges: tuple[tuple[float, float], ...] = ((0.0, 10.0), (40.0, 60.0), (90.0, 100.0))


@dataclass(frozen=True)
class PhaseSettings:
    min_soc_span_pct: float = 5.0
    max_dynamic_fraction: float = 0.10
    idle_fraction: float = 0.01
    soc_grid_step: float = 0.25


@dataclass(frozen=True)
class QocvSettings:
    period: str = "year"
    direction: str = "both"
    voltage_step_per_cell: float = 0.005
    min_phases_per_point: int = 3
    min_phases_per_period: int = 20
    outlier_limit_pp: float = 10.0
    align_tolerance_pp: float = 0.01
    align_max_iter: int = 20


@dataclass(frozen=True)
class DiffSettings:
    sigma_ic_per_cell: float = 0.010
    sigma_dv_pct: float = 1.0
    dv_grid_step: float = 0.25


@dataclass(frozen=True)
class FoiSettings:
    catalog_path: str | None = None
    drift_floor_pp: float = 0.5


_SECTIONS = {
    "ingest": IngestSettings,
    "soc": SocSettings,
    "dcr": DcrSettings,
    "phases": PhaseSettings,
    "qocv": QocvSettings,
    "diff": DiffSettings,
    "foi": FoiSettings,
}


def _coerce(cls, data: Mapping[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for [{cls.__name__}]: {sorted(unknown)}")
    out = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        out[k] = v
    return cls(**out)


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig | None = None
    ingest: IngestSettings = field(default_factory=IngestSettings)
    soc: SocSettings = field(default_factory=SocSettings)
    dcr: DcrSettings = field(default_factory=DcrSettings)
    phases: PhaseSettings = field(default_factory=PhaseSettings)
    qocv: QocvSettings = field(default_factory=QocvSettings)
    diff: DiffSettings = field(default_factory=DiffSettings)
    foi: FoiSettings = field(default_factory=FoiSettings)
    output_dir: str | None = None

    def __post_init__(self) -> None:
        positives = [
            self.phases.min_soc_span_pct,
            self.phases.max_dynamic_fraction,
            self.phases.idle_fraction,
            self.phases.soc_grid_step,
            self.qocv.voltage_step_per_cell,
            self.diff.sigma_ic_per_cell,
            self.diff.sigma_dv_pct,
            self.dcr.min_delta_c,
            self.ingest.gap_threshold_s,
        ]
        if any(not (x > 0) for x in positives):
            raise ConfigError("all thresholds must be positive")
        if self.qocv.period not in ("year", "month"):
            raise ConfigError("qocv.period must be 'year' or 'month'")
        if self.qocv.direction not in ("charge", "discharge", "both"):
            raise ConfigError("qocv.direction must be charge, discharge or both")
        if self.dcr.table_period not in ("year", "month"):
            raise ConfigError("dcr.table_period must be 'year' or 'month'")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = dict(data)
        kwargs: dict[str, Any] = {}
        if "system" in data:
            kwargs["system"] = SystemConfig.from_dict(data.pop("system"))
        for name, section in _SECTIONS.items():
            if name in data:
                kwargs[name] = _coerce(section, data.pop(name))
        if "output_dir" in data:
            kwargs["output_dir"] = data.pop("output_dir")
        data.pop("sim", None)
        if data:
            raise ConfigError(f"unknown config sections: {sorted(data)}")
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.system is not None:
            out["system"] = self.system.to_dict()
        for name in _SECTIONS:
            out[name] = _jsonable(asdict(getattr(self, name)))
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **sections: Any) -> "RunConfig":
        return replace(self, **sections)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_mapping(read_config_file(path))
