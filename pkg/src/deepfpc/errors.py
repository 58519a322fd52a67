"""Exception types shared across the package."""


class DeepFpcError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DeepFpcError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateError(DeepFpcError, ArithmeticError):
    """A vector that must be normalized has zero norm."""


class InsufficientSnapshotsError(InvalidArgumentError):
    """Fewer snapshots than sources were supplied to a subspace method."""


class ModelFormatError(DeepFpcError):
    """A serialized model file is malformed."""
