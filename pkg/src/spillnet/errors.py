"""Shared exception and warning types."""


class SpillnetError(Exception):
    """Base class for all spillnet errors."""


class ParseError(SpillnetError):
    """A file could not be parsed; carries file path and line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class DataError(SpillnetError):
    """Input data violates a structural requirement (NaN, shape, coverage)."""


class ColumnError(SpillnetError):
    """A named column is missing or unusable."""


class RankError(SpillnetError):
    """Design matrix is rank deficient; names the collinear columns."""


class ConvergenceError(SpillnetError):
    """An iterative fit failed to converge where success is required."""


class PositivityError(SpillnetError):
    """Propensity overlap failure (e.g. perfect separation)."""


class SpillnetWarning(UserWarning):
    """Base class for spillnet warnings."""


class ClampWarning(SpillnetWarning):
    """Negative new-count differences were clamped to zero."""


class DroppedRegionWarning(SpillnetWarning):
    """Rows referencing unknown regions were dropped during parsing."""


class DegeneratePredictorWarning(SpillnetWarning):
    """A predictor is constant, so permuting it cannot change the fit."""


class PositivityWarning(SpillnetWarning):
    """Estimated propensities are extreme for a noticeable share of rows."""


class TruncationWarning(SpillnetWarning):
    """Causal weights were truncated at the configured percentile."""


class CandidateDropWarning(SpillnetWarning):
    """An ensemble candidate failed on a fold and was dropped."""
