"""Exception and warning types shared across the package."""


class QFluctError(Exception):
    """Base class for all package errors."""


class SupportError(QFluctError, ValueError):
    """An operator is not contained in the window it is asked to live on."""


class WindowCapError(QFluctError):
    """A computation needs a window larger than the configured dimension guard."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class MixingCertificateError(QFluctError):
    """No exponential-mixing certificate is available for a state."""


class InvariantError(QFluctError, ValueError):
    """A declared structural invariant (normalization, positivity, ...) fails."""


class QuotientError(QFluctError):
    """The symplectic form does not descend to the quotient by the kernel of t."""


class ConfigError(QFluctError, ValueError):
    """Malformed experiment configuration."""


class ConditioningWarning(RuntimeWarning):
    """Complex-time evolution with a large spectral spread loses relative accuracy."""
