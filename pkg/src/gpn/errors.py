"""Exception types shared across the package."""


class GPNError(Exception):
    """Base class for all errors raised by gpn."""


class DimensionMismatch(GPNError, ValueError):
    pass


class NotPositiveDefinite(GPNError, ValueError):
    """A Cholesky pivot was not positive; the caller should add jitter."""


class JitterExhausted(GPNError, ValueError):
    """Factorization failed even at the largest jitter level."""


class NotPsd(GPNError, ValueError):
    pass


class NonFiniteGradient(GPNError, FloatingPointError):
    """Raised when a gradient contains NaN or Inf.

    ``checkpoint`` carries the last parameters known to be good, if any.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class NegativeVariance(GPNError, ArithmeticError):
    pass


class BadShape(GPNError, ValueError):
    pass


class ParseError(GPNError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaMismatch(GPNError, ValueError):
    pass


class BadMagic(GPNError, ValueError):
    pass


class TruncatedFile(GPNError, ValueError):
    pass


class DatasetMissing(GPNError, FileNotFoundError):
    pass
