"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class SykBatteryError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


class IndexOutOfRange(SykBatteryError, IndexError):
    pass


class NotHermitian(SykBatteryError, ValueError):
    pass


class ConvergenceFailure(SykBatteryError, RuntimeError):
    pass


class DimensionTooLarge(SykBatteryError, ValueError):
    pass


class DimensionMismatch(SykBatteryError, ValueError):
    pass


class TooFewSamples(SykBatteryError, ValueError):
    pass


class SiteOutOfRange(SykBatteryError, IndexError):
    pass


class SizeTooLarge(SykBatteryError, ValueError):
    pass


class SizeTooSmall(SykBatteryError, ValueError):
    pass


class ZeroBandwidth(SykBatteryError, ValueError):
    pass


class MaxAtBoundary(SykBatteryError, ValueError):
    pass


class NotNormalized(SykBatteryError, ValueError):
    pass


class ZeroEnergy(SykBatteryError, ValueError):
    pass


class OverlapVanished(SykBatteryError, ValueError):
    pass


class WindowTooSparse(SykBatteryError, ValueError):
    pass


class NoGrowth(SykBatteryError, ValueError):
    pass


class RankDeficient(SykBatteryError, ValueError):
    pass


class NoConvergence(SykBatteryError, RuntimeError):
    pass


class NonpositiveLambda(SykBatteryError, ValueError):
    pass


class FillInOverflow(SykBatteryError, MemoryError):
    pass


class MissingResults(SykBatteryError, FileNotFoundError):
    pass


class ConfigError(SykBatteryError, ValueError):
    pass


class EnsembleFailure(SykBatteryError, RuntimeError):
    pass
