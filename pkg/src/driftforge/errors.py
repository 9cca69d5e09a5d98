"""Exception hierarchy shared by the library and the CLI."""


class DriftforgeError(Exception):
    """Base class for all errors raised by driftforge."""


class DataError(DriftforgeError, ValueError):
    """Input data is malformed or inconsistent (CLI exit code 2)."""


class NumericalError(DriftforgeError, ArithmeticError):
    """A non-finite value appeared where a finite one is required (CLI exit code 3)."""


class StaleTraceError(DriftforgeError, RuntimeError):
    """A forward trace was used after the model parameters changed."""


class BankUnavailableError(DriftforgeError):
    """No trained predictor exists for the requested split."""
