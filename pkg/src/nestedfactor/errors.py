"""Exception hierarchy shared by all nestedfactor modules."""


class NestedFactorError(Exception):
    """Base class for all library errors."""


# --- data ingestion ---

class ParseError(NestedFactorError):
    """Malformed input row or header."""


class CoverageError(NestedFactorError):
    """Missing (date, asset) cells above the configured threshold."""


class DuplicateError(NestedFactorError):
    """Repeated (date, asset) cell in a long-format file."""


class DegenerateColumnError(NestedFactorError):
    """Column with zero sample variance cannot be standardized."""


# --- numerics ---

class RankError(NestedFactorError):
    """Requested rank exceeds what the data supports."""


class ConvergenceError(NestedFactorError):
    """Optimizer hit its iteration cap before meeting tolerance."""


class SingularityError(NestedFactorError):
    """A regression design matrix is not invertible."""


class SingularMatrixError(NestedFactorError):
    """Matrix inversion failed even after regularization."""


class DomainError(NestedFactorError):
    """Argument outside the mathematical domain of the operation."""


class DegenerateSeriesError(NestedFactorError):
    """A time series is identically zero."""


class LengthMismatchError(NestedFactorError):
    """Paired series have different lengths."""


class DimensionError(NestedFactorError):
    """Inconsistent array dimensions."""


class InfeasibleMomentsError(NestedFactorError):
    """(skewness, kurtosis) target outside the reachable region."""


class ZeroRowError(NestedFactorError):
    """All-zero row where a nonzero vector is required."""


class DivisionByZeroError(NestedFactorError):
    """Denominator of a ratio statistic is zero."""


class CalibrationError(NestedFactorError):
    """A per-window calibration failed inside the backtest."""


# --- orchestration ---

class ConfigError(NestedFactorError):
    """Invalid run configuration."""


class MissingArtifactError(NestedFactorError):
    """A required calibration artifact is absent on disk."""
