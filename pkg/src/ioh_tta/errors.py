"""Exception hierarchy shared by every module."""


class IohTtaError(Exception):
    """Base class for all package errors."""


class ConfigError(IohTtaError, ValueError):
    """Invalid configuration value or combination."""


class InputError(IohTtaError, ValueError):
    """Invalid data passed to an operation."""


class GenerationError(IohTtaError, RuntimeError):
    """Synthetic cohort generation could not meet its targets."""


class FormatError(IohTtaError):
    """Base class for binary file load failures."""


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
