"""Quasi-OCV reconstruction and degradation tracking for home storage telemetry."""

__version__ = "0.1.0"
