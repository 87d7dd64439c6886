"""Exception hierarchy shared across the package."""


class MoelabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MoelabError):
    """Invalid or inconsistent configuration (bad shapes, infeasible sizing)."""


class InputError(MoelabError):
    """Invalid runtime input (out-of-range ids, empty collections)."""


class NumericalError(MoelabError):
    """Non-finite values where finite ones are required."""


class DivergenceError(MoelabError):
    """Training produced a non-finite loss or gradient.

    Carries the path of the last good checkpoint when one was saved.
    """

    def __init__(self, message, last_good_path=None):
        super().__init__(message)
        self.last_good_path = last_good_path


class SweepError(MoelabError):
    """Every run in a hyperparameter sweep diverged. Carries the sweep table."""

    def __init__(self, message, table):
        super().__init__(message)
        self.table = table
