"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array sizes or transform dimensions do not fit together."""


class UnsupportedShapeError(DimensionError):
    """Operator shape outside the supported M <= N regime."""


class DomainError(ValueError):
    """A scalar parameter lies outside its allowed range."""


class DivergenceDetected(RuntimeError):
    """An iteration produced non-finite values or ran away.

    ``state`` holds the last state whose entries were all finite.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class DenoiserError(RuntimeError):
    """Base class for external denoiser failures."""


class DenoiserSpawnError(DenoiserError):
    pass


class DenoiserProtocolError(DenoiserError):
    pass


class DenoiserTimeoutError(DenoiserError):
    pass


class PGMFormatError(ValueError):
    """Malformed or unsupported PGM file."""
