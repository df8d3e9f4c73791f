"""Cell-level OCV presets.

Each preset defines SOC as a function of voltage: a linear background plus
one smoothed step (normal CDF) per voltage plateau.  A plateau at ``mu``
with width ``sigma`` and weight ``w`` shows up as an IC peak at ``mu``.
The shapes are qualitative stand-ins for the three chemistries, not fits
to real cells.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..config import Chemistry


@dataclass(frozen=True)
class Plateau:
    mu: float
    sigma: float
    weight: float


@dataclass(frozen=True)
class CellPreset:
    name: str
    chemistry: Chemistry
    v_eod: float
    v_eoc: float
    background: float  # raw SOC units per volt
    plateaus: tuple[Plateau, ...]


LMO = CellPreset(
    "lmo", Chemistry.LMO_NMC_BLEND, 3.35, 4.15, 16.0,
    (Plateau(3.50, 0.016, 8.5), Plateau(3.66, 0.030, 24.0),
     Plateau(3.93, 0.028, 18.0), Plateau(4.07, 0.025, 30.0)),
)

NMC = CellPreset(
    "nmc", Chemistry.NMC, 3.40, 4.10, 20.0,
    (Plateau(3.46, 0.020, 6.0), Plateau(3.62, 0.030, 30.0), Plateau(3.72, 0.025, 12.0),
     Plateau(3.88, 0.030, 14.0), Plateau(4.02, 0.025, 14.0)),
)

LFP = CellPreset(
    "lfp", Chemistry.LFP, 3.00, 3.50, 10.0,
    (Plateau(3.22, 0.015, 8.0), Plateau(3.295, 0.008, 45.0), Plateau(3.335, 0.008, 38.0)),
)

PRESETS = {Chemistry.LMO_NMC_BLEND: LMO, Chemistry.NMC: NMC, Chemistry.LFP: LFP}


def preset_for(chemistry: Chemistry | str) -> CellPreset:
    return PRESETS[Chemistry.parse(chemistry)]
