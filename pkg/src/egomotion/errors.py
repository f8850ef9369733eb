"""Exception hierarchy shared across the package.

CLI exit-code mapping: UsageError -> 1, DataError (and subclasses) -> 2,
NumericalFailure -> 3.
"""


class UsageError(ValueError):
    """Bad flags, bad config keys, inconsistent command-line requests."""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, arrays, skeletons)."""


class DegenerateRotationError(DataError):
    """6D rotation vector with parallel or zero column vectors."""


class DegenerateYawError(DataError):
    """Head orientation too close to vertical to define a floor yaw."""


class ContainerError(DataError):
    """Base error for the binary container format."""


class ContainerVersionError(ContainerError):
    """Unrecognized container format version."""


class ContainerSizeError(ContainerError):
    """Array directory inconsistent with the payload (offsets/sizes)."""


class ContainerTruncatedError(ContainerError):
    """Payload shorter than the array directory requires."""


class NumericalFailure(RuntimeError):
    """Non-finite values or optimizer breakdown during heavy computation."""


class TrainingDiverged(NumericalFailure):
    """Loss became non-finite; carries the last good checkpoint state."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
