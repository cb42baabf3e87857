"""Exception hierarchy shared across the package."""


class RelprivError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(RelprivError):
    """Malformed or inconsistent input data (files, graphs, splits)."""


class ConfigError(RelprivError):
    """Invalid or conflicting configuration values."""


class CalibrationError(RelprivError):
    """The accountant cannot meet the requested privacy target."""


class TrainingError(RelprivError):
    """Training aborted (non-finite loss or gradients)."""
