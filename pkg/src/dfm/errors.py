"""Exception types raised across the package."""


class DFMError(Exception):
    """Base class for all package errors."""


class InvalidAlphabetError(DFMError, ValueError):
    pass


class InvalidScheduleError(DFMError, ValueError):
    pass


class CapacityError(DFMError, ValueError):
    pass


class TimeDomainError(DFMError, ValueError):
    pass


class NotAvailableError(DFMError, ValueError):
    pass


class InvalidDenoiserError(DFMError, ValueError):
    pass


class UnreachableStateError(DFMError, ValueError):
    pass


class TrainingDivergedError(DFMError, RuntimeError):
    pass


class IncompleteSampleError(DFMError, RuntimeError):
    pass


class ModeError(DFMError, ValueError):
    pass


class IncompatibleConfigError(DFMError, ValueError):
    pass
