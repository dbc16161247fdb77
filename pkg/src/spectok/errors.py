"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, budget/resource problems exit 3.
"""


class SpectokError(Exception):
    """Base class for all spectok errors."""


class FormatError(SpectokError):
    """Unsupported or malformed file content (encoding, container layout)."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class BadVersionError(FormatError):
    """Container version is unknown to this build."""


class PayloadSizeError(FormatError):
    """Declared element counts do not match the payload byte length."""


class KindError(FormatError):
    """File holds a different object kind than the caller asked for."""


class InvariantError(FormatError):
    """A loaded object violates its own declared invariants."""


class RateMismatchError(SpectokError):
    """Audio header sample rate differs from the expected rate (no resampling)."""


class DataError(SpectokError):
    """Input data violates a precondition (non-finite values, empty corpus, ...)."""


class ShapeError(SpectokError):
    """Array dimensions do not match the model or operation."""


class ConfigError(SpectokError):
    """Inconsistent or out-of-range configuration."""


class UndefinedMetricError(SpectokError):
    """A metric has no defined value on the given inputs (e.g. every class skipped)."""


class BudgetError(SpectokError):
    """Projected resource usage exceeds the declared budget."""
