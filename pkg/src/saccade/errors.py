"""Shared exception types."""


class ConfigurationError(ValueError):
    """Shapes, specs, or config files that cannot be satisfied."""


class InputFormatError(ValueError):
    """Malformed external input files (IDX, dataset containers, metrics)."""


class DegenerateWeightsError(RuntimeError):
    """Every importance weight underflowed to zero; caller may resample."""


class EnumerationBudgetError(ValueError):
    """A discrete world is too large for exact enumeration."""


class DegenerateTrainingError(RuntimeError):
    """Too many degenerate-weight skips in a trailing update window."""
