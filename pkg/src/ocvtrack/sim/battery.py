"""Ground-truth battery: OCV curve, DCR surface and aging schedule.

SOC inside the simulator is counted from the empty end in percent of the
nominal capacity, so a fresh battery spans [0, 100] and an aged one spans
[0, usable].  The pipeline anchors at full charge instead; the two frames
differ by ``100 - usable``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import ndtr

from ..errors import ConfigOutOfRange, DegradationExceedsCapacity
from .presets import LMO, CellPreset, Plateau

SOC_TABLE_STEP = 0.01
_V_TABLE_STEP = 1e-4
MIN_USABLE_PCT = 10.0


@dataclass(frozen=True)
class DcrSurface:
    """Cell resistance r0 * (1 + ks*exp(-soc/tau_s)) * (1 + kt*exp(-T/tau_t)).

    Defaults span about 5 mOhm (high SOC, warm) to 9 mOhm (empty, 0 degC).
    """

    r0: float = 0.005
    k_soc: float = 0.4
    tau_soc: float = 12.0
    k_temp: float = 0.2857
    tau_temp: float = 8.0

    def __call__(self, soc, temp):
        soc = np.asarray(soc, dtype=np.float64)
        temp = np.asarray(temp, dtype=np.float64)
        return self.r0 * (1.0 + self.k_soc * np.exp(-soc / self.tau_soc)) * (
            1.0 + self.k_temp * np.exp(-temp / self.tau_temp))

    def params(self) -> np.ndarray:
        return np.array([self.r0, self.k_soc, self.tau_soc, self.k_temp, self.tau_temp])


@dataclass(frozen=True)
class Degradation:
    """Per-year aging rates; all are applied additively in years except
    compounded DCR growth."""

    lli_shift_pp: float = 0.0
    capacity_fade_pp: float = 0.0
    dcr_growth_pct: float = 0.0
    dcr_growth_mode: str = "compound"
    lam_plateau_scale: tuple[float, ...] = ()
    peak_shift_v: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.dcr_growth_mode not in ("compound", "linear"):
            raise ConfigOutOfRange(f"dcr_growth_mode must be compound or linear, not {self.dcr_growth_mode!r}")
        if self.lli_shift_pp < 0 or self.capacity_fade_pp < 0:
            raise ConfigOutOfRange("LLI and capacity fade rates must be >= 0")
        if self.dcr_growth_pct <= -100:
            raise ConfigOutOfRange("dcr_growth_pct must exceed -100")

    def dcr_factor(self, years: float) -> float:
        g = self.dcr_growth_pct / 100.0
        if self.dcr_growth_mode == "compound":
            return (1.0 + g) ** years
        return 1.0 + g * years

    def to_dict(self) -> dict:
        return {
            "lli_shift_pp": self.lli_shift_pp,
            "capacity_fade_pp": self.capacity_fade_pp,
            "dcr_growth_pct": self.dcr_growth_pct,
            "dcr_growth_mode": self.dcr_growth_mode,
            "lam_plateau_scale": list(self.lam_plateau_scale),
            "peak_shift_v": list(self.peak_shift_v),
        }


@dataclass(frozen=True, eq=False)
class SimBattery:
    preset: CellPreset = LMO
    cells_series: int = 14
    capacity_ah: float = 40.0
    degradation: Degradation = field(default_factory=Degradation)
    dcr_surface: DcrSurface = field(default_factory=DcrSurface)
    age_years: float = 0.0

    def __post_init__(self) -> None:
        if self.capacity_ah <= 0 or self.cells_series < 1:
            raise ConfigOutOfRange("capacity and cell count must be positive")
        if self.age_years < 0:
            raise ConfigOutOfRange("age must be >= 0")
        n = len(self.preset.plateaus)
        for name in ("lam_plateau_scale", "peak_shift_v"):
            v = getattr(self.degradation, name)
            if v and len(v) != n:
                raise ConfigOutOfRange(f"{name} needs {n} entries for preset {self.preset.name}")
        _ = self._curve  # validate the aged curve eagerly

    # -- OCV ---------------------------------------------------------------

    def aged_plateaus(self) -> tuple[Plateau, ...]:
        y = self.age_years
        d = self.degradation
        out = []
        for k, p in enumerate(self.preset.plateaus):
            scale = 1.0 + (d.lam_plateau_scale[k] * y if d.lam_plateau_scale else 0.0)
            if scale <= 0:
                raise DegradationExceedsCapacity(f"plateau {k} vanished after {y} years")
            shift = d.peak_shift_v[k] * y if d.peak_shift_v else 0.0
            out.append(Plateau(p.mu + shift, p.sigma, p.weight * scale))
        return tuple(out)

    def _raw(self, v: np.ndarray, plateaus: tuple[Plateau, ...]) -> np.ndarray:
        pre = self.preset
        out = pre.background * (v - pre.v_eod)
        for p in plateaus:
            out = out + p.weight * (ndtr((v - p.mu) / p.sigma) - ndtr((pre.v_eod - p.mu) / p.sigma))
        return out

    @cached_property
    def _curve(self) -> tuple[np.ndarray, np.ndarray, float]:
        """(soc grid, cell voltage, usable %) in the empty-anchored frame."""
        pre = self.preset
        v = np.linspace(pre.v_eod, pre.v_eoc, int(round((pre.v_eoc - pre.v_eod) / _V_TABLE_STEP)) + 1)
        scale = 100.0 / float(self._raw(np.array([pre.v_eoc]), pre.plateaus)[0])
        s = scale * self._raw(v, self.aged_plateaus())
        d = self.degradation
        lli = d.lli_shift_pp * self.age_years
        fade = d.capacity_fade_pp * self.age_years
        s = s - lli
        u1 = float(s[-1])
        usable = u1 - fade
        if usable < MIN_USABLE_PCT:
            raise DegradationExceedsCapacity(
                f"usable capacity {usable:.1f} % after {self.age_years} years")
        s = s * (usable / u1)
        # start of the aged curve where the shifted SOC crosses zero
        k = int(np.searchsorted(s, 0.0))
        v0 = float(np.interp(0.0, s[k - 1:k + 1], v[k - 1:k + 1])) if k > 0 else float(v[0])
        s = np.concatenate([[0.0], s[k:]]) if k > 0 else s
        v = np.concatenate([[v0], v[k:]]) if k > 0 else v
        n = int(math.floor(usable / SOC_TABLE_STEP + 1e-9))
        grid = np.arange(n + 1) * SOC_TABLE_STEP
        grid[-1] = min(grid[-1], usable)
        if grid[-1] < usable - 1e-9:
            grid = np.append(grid, usable)
        return grid, np.interp(grid, s, v), usable

    @property
    def usable_pct(self) -> float:
        return self._curve[2]

    @property
    def usable_ah(self) -> float:
        return self.capacity_ah * self.usable_pct / 100.0

    def ocv_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell OCV on a uniform SOC grid (empty-anchored frame)."""
        g, v, _ = self._curve
        return g, v

    def ocv_cell(self, soc) -> np.ndarray:
        g, v, _ = self._curve
        return np.interp(soc, g, v)

    def ocv(self, soc) -> np.ndarray:
        return self.cells_series * self.ocv_cell(soc)

    def soc_at_cell_voltage(self, v) -> np.ndarray:
        g, vv, _ = self._curve
        return np.interp(v, vv, g)

    def true_ic(self, v) -> np.ndarray:
        """Analytic dSOC/dV per cell (empty-anchored SOC, %/V)."""
        pre = self.preset
        v = np.asarray(v, dtype=np.float64)
        scale = 100.0 / float(self._raw(np.array([pre.v_eoc]), pre.plateaus)[0])
        d = self.degradation
        lli = d.lli_shift_pp * self.age_years
        u1 = scale * float(self._raw(np.array([pre.v_eoc]), self.aged_plateaus())[0]) - lli
        comp = self.usable_pct / u1
        out = np.full(v.shape, pre.background)
        for p in self.aged_plateaus():
            out = out + p.weight * np.exp(-0.5 * ((v - p.mu) / p.sigma) ** 2) / (p.sigma * math.sqrt(2 * math.pi))
        return out * scale * comp

    # -- resistance ----------------------------------------------------------

    @property
    def dcr_factor(self) -> float:
        return self.degradation.dcr_factor(self.age_years)

    def top_frame(self, soc) -> np.ndarray:
        """Convert empty-anchored SOC to the full-anchored frame used by the pipeline."""
        return np.asarray(soc, dtype=np.float64) + (100.0 - self.usable_pct)

    def dcr_cell(self, soc, temp) -> np.ndarray:
        return self.dcr_surface(self.top_frame(soc), temp) * self.dcr_factor

    def dcr(self, soc, temp) -> np.ndarray:
        """System-level resistance in ohms."""
        return self.cells_series * self.dcr_cell(soc, temp)

    def terminal_voltage(self, soc, temp, current) -> np.ndarray:
        return self.ocv(soc) + np.asarray(current) * self.dcr(soc, temp)

    # -- system view ---------------------------------------------------------

    @property
    def v_eod(self) -> float:
        return self.cells_series * self.preset.v_eod

    @property
    def v_eoc(self) -> float:
        return self.cells_series * self.preset.v_eoc

    def to_dict(self) -> dict:
        return {
            "preset": self.preset.name,
            "cells_series": self.cells_series,
            "capacity_ah": self.capacity_ah,
            "age_years": self.age_years,
            "usable_pct": self.usable_pct,
            "dcr_factor": self.dcr_factor,
            "degradation": self.degradation.to_dict(),
            "dcr_surface": {"r0": self.dcr_surface.r0, "k_soc": self.dcr_surface.k_soc,
                            "tau_soc": self.dcr_surface.tau_soc, "k_temp": self.dcr_surface.k_temp,
                            "tau_temp": self.dcr_surface.tau_temp},
        }


def age(battery: SimBattery, years: float) -> SimBattery:
    """Battery after ``years`` more of its degradation schedule."""
    if years < 0:
        raise ConfigOutOfRange("years must be >= 0")
    return replace(battery, age_years=battery.age_years + years)
