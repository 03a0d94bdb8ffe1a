"""Exception hierarchy shared by every convseg module.

The CLI maps :class:`DataError` subclasses to exit code 2 and
:class:`DivergenceError` to exit code 3.
"""


class ConvsegError(Exception):
    """Base class for all library errors."""


class DimensionError(ConvsegError, ValueError):
    pass


class ParameterError(ConvsegError, ValueError):
    pass


class DegenerateBatchError(ConvsegError, ValueError):
    pass


class NeighborhoodError(ConvsegError, ValueError):
    pass


class StateError(ConvsegError, ValueError):
    pass


class InstabilityError(ConvsegError, FloatingPointError):
    pass


class DivergenceError(ConvsegError, FloatingPointError):
    pass


class ConfigError(ConvsegError, ValueError):
    pass


class DataError(ConvsegError, ValueError):
    """Problems with input files or their contents."""


class LabelError(DataError):
    pass


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class CapacityError(DataError):
    pass


class CategoryMismatchError(DataError):
    pass


class ConflictError(DataError):
    pass


class UpgradeError(DataError):
    pass
