"""Exception hierarchy shared by all pipeline stages.

The CLI maps the top-level classes onto exit codes, so every stage raises
something derived from :class:`OcvTrackError` for data-dependent failures.
"""

from __future__ import annotations


class OcvTrackError(Exception):
    """Base class for recoverable, data-dependent failures."""


class ConfigError(OcvTrackError, ValueError):
    pass


# ingest
class IngestError(OcvTrackError):
    pass


class HeaderError(IngestError):
    pass


class NonMonotonicTimestamp(IngestError):
    pass


# dcr
class DcrError(OcvTrackError):
    pass


class ZeroCurrentDelta(DcrError):
    pass


class NegativeResistance(DcrError):
    pass


class EmptyTable(DcrError):
    pass


class InsufficientYears(DcrError):
    pass


# phases / qocv
class MissingDcrTable(OcvTrackError):
    pass


class NoVoltageOverlap(OcvTrackError):
    pass


class InsufficientPhases(OcvTrackError):
    pass


class VoltageOutOfRange(OcvTrackError):
    pass


# diff
class SigmaTooLarge(OcvTrackError, ValueError):
    pass


class NonMonotonicVoltage(OcvTrackError):
    pass


class NonMonotonicSoc(OcvTrackError):
    pass


# foi
class UnknownChemistry(OcvTrackError, ValueError):
    pass


class WindowOutOfDomain(OcvTrackError):
    pass


class NoExtremumFound(OcvTrackError):
    pass


class InsufficientObservations(OcvTrackError):
    pass


# stats
class StatsError(OcvTrackError, ValueError):
    pass


class LengthMismatch(StatsError):
    pass


class TooFewSamples(StatsError):
    pass


class ZeroVariance(StatsError):
    pass


class DegenerateR(StatsError):
    pass


# sim
class ConfigOutOfRange(OcvTrackError, ValueError):
    pass


class DegradationExceedsCapacity(OcvTrackError, ValueError):
    pass
