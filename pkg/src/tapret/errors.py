"""Exception types shared across the package."""


class TapretError(Exception):
    """Base class for all package errors."""


class EmptyInputError(TapretError, ValueError):
    pass


class InvalidTapError(TapretError, ValueError):
    pass


class InvalidTokenError(TapretError, ValueError):
    pass


class UnsupportedOptionError(TapretError, ValueError):
    """An option label does not map to a single backend token."""


class EmptySampleError(TapretError, ValueError):
    pass


class DimensionMismatchError(TapretError, ValueError):
    pass


class CorpusError(TapretError):
    pass


class ConfigError(TapretError, ValueError):
    pass
