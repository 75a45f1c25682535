"""Exception hierarchy shared across the toolkit.

Every error carries a ``category`` used by the service layer (HTTP status)
and the CLI (exit code): ``config`` -> 1, ``data`` -> 2, ``numerical`` -> 3.
"""


class DifkitError(Exception):
    """Base class for all toolkit errors."""

    category = "error"


class ConfigError(DifkitError):
    """Invalid configuration or usage: bad paths, flags, or recode specs."""

    category = "config"


class MissingColumnError(ConfigError):
    """A column named in the recode spec is absent from the input file."""


class DataError(DifkitError):
    """The input data violates a contract of the requested operation."""

    category = "data"


class UnmappedCodeError(DataError):
    """A raw code was observed that the recode spec does not cover."""

    def __init__(self, column, code, row):
        self.column = column
        self.code = code
        self.row = row
        super().__init__(
            f"unmapped code {code!r} in column {column!r} at data row {row}"
        )


class EmptyResultError(DataError):
    """All rows were dropped during ingestion."""


class PreconditionError(DataError):
    """An operation's stated precondition does not hold for the inputs."""


class UntestableError(DataError):
    """Every stratum is degenerate; the stratified test is undefined."""


class NumericalError(DifkitError):
    """Estimation failed for numerical reasons."""

    category = "numerical"


class SingularDesignError(NumericalError):
    """The design matrix is rank deficient."""


class DegenerateTestError(NumericalError):
    """A test statistic is undefined (for example a zero standard error)."""


class EvaluationError(NumericalError):
    """A likelihood evaluation diverged; reports the offending cluster."""

    def __init__(self, message, cluster=None):
        self.cluster = cluster
        super().__init__(message)
