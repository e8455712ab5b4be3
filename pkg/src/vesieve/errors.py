"""Exception hierarchy.

DataError/ConfigError mean the inputs are unusable (CLI exit 2);
NumericalError and subclasses mean a computation failed (CLI exit 1).
"""


class VesieveError(Exception):
    pass


class DataError(VesieveError):
    pass


class ConfigError(VesieveError):
    pass


class NumericalError(VesieveError):
    pass


class ConvergenceError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class StudyFailureError(NumericalError):
    """Raised when more than the tolerated share of replicates fail."""

    def __init__(self, message, summary=None):
        super().__init__(message)
        self.summary = summary
