"""Exception hierarchy shared across the package."""


class CvmdError(Exception):
    """Base class for all package errors."""


class SchemaError(CvmdError):
    """A file or record does not match the expected schema."""


class DataError(CvmdError):
    """Input data violates a structural precondition (bad frames, empty class, ...)."""


class ConfigError(CvmdError):
    """A configuration value is missing, malformed, or infeasible."""


class InputError(CvmdError):
    """An in-process argument has the wrong shape, range, or content."""


class TrainingError(CvmdError):
    """Training diverged or produced non-finite losses."""
