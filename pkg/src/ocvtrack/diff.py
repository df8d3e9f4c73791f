"""Gaussian smoothing and IC / DV differentiation of fused curves."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import NonMonotonicSoc, NonMonotonicVoltage, SigmaTooLarge
from .qocv import QocvCurve


class DiffKind(str, enum.Enum):
    IC = "IncrementalCapacity"
    DV = "DifferentialVoltage"


@dataclass(frozen=True, eq=False)
class DiffCurve:
    kind: DiffKind
    x: np.ndarray
    y: np.ndarray
    smoothing_sigma: float
    source: tuple[str, str, str] = ("", "", "")
    # (low, high): the curve stops there for lack of data, not at a cell limit
    open_ends: tuple[bool, bool] = (False, False)

    def __len__(self) -> int:
        return len(self.x)

    def scaled(self, k: float) -> "DiffCurve":
        return replace(self, y=self.y * k)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "sigma": self.smoothing_sigma,
                "open_ends": list(self.open_ends),
                "source": {"system": self.source[0], "period": self.source[1],
                           "direction": self.source[2]}}


def gaussian_kernel(sigma_samples: float) -> np.ndarray:
    half = int(np.ceil(4.0 * sigma_samples))
    k = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma_samples) ** 2)
    return w / w.sum()


def gaussian_smooth(y: np.ndarray, sigma_samples: float) -> np.ndarray:
    """Convolve with a +-4 sigma Gaussian, reflecting the signal at both ends.

    Reflection repeats the edge sample (``np.pad(mode="symmetric")``).  A
    sigma below one sample returns the input unchanged.
    """
    y = np.asarray(y, dtype=np.float64)
    if sigma_samples < 1.0:
        return y.copy()
    w = gaussian_kernel(sigma_samples)
    half = len(w) // 2
    if half >= len(y):
        raise SigmaTooLarge(f"kernel half-width {half} exceeds signal length {len(y)}")
    padded = np.pad(y, half, mode="symmetric")
    return np.convolve(padded, w, mode="valid")


def _uniform_step(x: np.ndarray) -> float:
    dx = np.diff(x)
    step = float(np.median(dx))
    if not np.allclose(dx, step, rtol=1e-6, atol=1e-12):
        raise ValueError("smoothing requires a uniform grid")
    return step


def smooth(curve: QocvCurve, sigma: float) -> QocvCurve:
    """Smooth the dependent variable of ``curve``; sigma is in grid-axis units.

    On a voltage grid the SOC is smoothed (sigma in volts); on a SOC grid the
    voltage is smoothed (sigma in percent SOC).
    """
    x = curve.voltage if curve.axis == "voltage" else curve.mean_soc
    y = curve.mean_soc if curve.axis == "voltage" else curve.voltage
    if len(x) < 2:
        return curve
    span = float(x[-1] - x[0])
    if sigma > 0.1 * span:
        raise SigmaTooLarge(f"sigma {sigma:g} exceeds 10 % of the curve span {span:g}")
    step = _uniform_step(x)
    ys = gaussian_smooth(y, sigma / step)
    if curve.axis == "voltage":
        return replace(curve, mean_soc=ys, meta={**curve.meta, "sigma": sigma})
    return replace(curve, voltage=ys, meta={**curve.meta, "sigma": sigma})


def _source(curve: QocvCurve, system: str) -> tuple[str, str, str]:
    return (system, curve.period, curve.direction.value)


def ica(curve: QocvCurve, system: str = "") -> DiffCurve:
    """dSOC/dV in %Q/V by central differences (second-order one-sided at the ends)."""
    if curve.axis != "voltage":
        raise ValueError("ica needs a curve on a voltage grid")
    v = curve.voltage
    if len(v) < 2 or np.any(np.diff(v) <= 0):
        raise NonMonotonicVoltage("voltage grid must be strictly increasing")
    y = np.gradient(curve.mean_soc, v, edge_order=2)
    return DiffCurve(DiffKind.IC, v.copy(), y, float(curve.meta.get("sigma", 0.0)),
                     _source(curve, system))


def dva(curve: QocvCurve, system: str = "") -> DiffCurve:
    """dV/dSOC in V/%Q by central differences (second-order one-sided at the ends)."""
    if curve.axis != "soc":
        raise ValueError("dva needs a curve on a SOC grid; use QocvCurve.to_soc_grid")
    s = curve.mean_soc
    if len(s) < 2 or np.any(np.diff(s) <= 0):
        raise NonMonotonicSoc("SOC grid must be strictly increasing")
    y = np.gradient(curve.voltage, s, edge_order=2)
    return DiffCurve(DiffKind.DV, s.copy(), y, float(curve.meta.get("sigma", 0.0)),
                     _source(curve, system))
