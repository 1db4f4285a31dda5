"""Exception taxonomy shared by all pqauth modules."""


class PqAuthError(Exception):
    """Base class for all pqauth domain errors."""


class ParameterError(PqAuthError, ValueError):
    """An argument violates a documented precondition."""


class InsufficientDataError(PqAuthError, ValueError):
    """Input sequence is too short for the requested operation."""


class DegenerateRangeError(PqAuthError, ValueError):
    """Signal has zero amplitude range and cannot be normalized."""


class ShapeError(PqAuthError, ValueError):
    """Array or segment shape does not match the expected layout."""


class ConflictError(PqAuthError):
    """Attempt to overwrite an existing resource without permission."""


class NotEnrolledError(PqAuthError):
    """Claimed subject id has no stored template."""


class ModelVersionError(PqAuthError):
    """Stored template was produced with a different model version."""


class TrainingDivergedError(PqAuthError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")


class FormatError(PqAuthError):
    """A serialized artifact is corrupt or has the wrong layout."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
