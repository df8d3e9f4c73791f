"""Synthetic battery and household load with known ground truth."""

from .battery import Degradation, DcrSurface, SimBattery, age
from .generate import (LoadScenario, Segment, SimResult, Simulation, build_simulation, generate,
                       load_event_log, simulate_years, system_config)
from .presets import LFP, LMO, NMC, PRESETS, preset_for

__all__ = [
    "Degradation", "DcrSurface", "SimBattery", "age", "LoadScenario", "Segment", "SimResult",
    "Simulation", "build_simulation", "generate", "load_event_log", "simulate_years", "system_config",
    "LFP", "LMO", "NMC", "PRESETS", "preset_for",
]
