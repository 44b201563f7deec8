"""Exception and warning types shared across the package."""


class StreamQIFError(Exception):
    """Base class for all package errors."""


class ValidationError(StreamQIFError, ValueError):
    """Raised when inputs violate a documented contract (bad data, bad config)."""


class NumericalError(StreamQIFError, RuntimeError):
    """Raised when a numerical procedure fails (singularities, divergence).

    Carries optional diagnostics so callers can inspect what went wrong.
    """

    def __init__(self, message, *, beta=None, residual_norm=None, n_iter=None):
        super().__init__(message)
        self.beta = beta
        self.residual_norm = residual_norm
        self.n_iter = n_iter


class NumericalWarning(UserWarning):
    """Emitted for recoverable numerical events (ridge regularization,
    dropped decay-parameter candidates, information-matrix diagnostics)."""
