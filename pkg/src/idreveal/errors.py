"""Exception hierarchy shared by all idreveal modules."""


class IDRevealError(Exception):
    pass


class FormatError(IDRevealError):
    """Bad magic number or unsupported version in a binary file."""


class DimensionError(IDRevealError):
    pass


class TruncationError(IDRevealError):
    pass


class EmptyInputError(IDRevealError, ValueError):
    pass


class IdentityMismatchError(IDRevealError, ValueError):
    pass


class ShapeError(IDRevealError, ValueError):
    pass


class ConfigError(IDRevealError, ValueError):
    pass


class AccumulationError(IDRevealError, RuntimeError):
    """backward() would overwrite gradients that were never reset."""


class MissingGradError(IDRevealError, RuntimeError):
    pass


class DomainError(IDRevealError, ValueError):
    pass


class DataError(IDRevealError):
    pass


class DivergenceError(IDRevealError, RuntimeError):
    """Raised on a non-finite loss. ``last_good`` holds the last finite checkpoint."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class SelfSwapError(IDRevealError, ValueError):
    pass


class SelfReenactError(IDRevealError, ValueError):
    pass


class EvalError(IDRevealError, ValueError):
    pass


class ProtocolError(IDRevealError, ValueError):
    pass
