"""Exception hierarchy shared by every isgan module."""


class IsganError(Exception):
    """Base class for all errors raised by isgan."""


class UnsupportedFormatError(IsganError, ValueError):
    """Input file is not an 8-bit gray or RGB PNG."""


class WrongColorSpaceError(IsganError, ValueError):
    pass


class DimensionMismatchError(IsganError, ValueError):
    """Two operands (images, tensors, parameters) have incompatible shapes."""


# Layer-level name for the same condition.
ShapeMismatchError = DimensionMismatchError


class InvalidSizeError(IsganError, ValueError):
    pass


class ImageTooSmallError(IsganError, ValueError):
    pass


class EmptyInputError(IsganError, ValueError):
    pass


class NoRecordedForwardError(IsganError, RuntimeError):
    """backward() was called on an output that carries no recorded graph."""


class EmptyDatasetError(IsganError, ValueError):
    pass


class InsufficientImagesError(IsganError, ValueError):
    pass


class NonFiniteLossError(IsganError, FloatingPointError):
    """Training produced a NaN or infinite loss; carries epoch/batch context."""

    def __init__(self, message, epoch=None, batch=None, terms=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.terms = dict(terms or {})


class CheckpointError(IsganError, OSError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass
