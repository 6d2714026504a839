"""Exception types shared across the package."""


class AepoError(Exception):
    """Base class for all package errors."""


class ConfigError(AepoError, ValueError):
    """Invalid configuration value or dimension."""


class ContextOverflowError(AepoError, ValueError):
    """A token sequence does not fit in the model context."""


class TokenRangeError(AepoError, ValueError):
    """A token id is outside the vocabulary."""


class FormatError(AepoError):
    """A response does not follow the four-stage control-token layout."""


class DisconnectedLossError(AepoError):
    """The loss was not built from the tracked parameters."""


class WarmupInsufficientError(AepoError):
    """Supervised warm-up did not reach the required parse rate."""


class NonFiniteLossError(AepoError, FloatingPointError):
    """Training produced a NaN or infinite loss."""
