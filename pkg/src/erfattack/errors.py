"""Exception types shared across the package."""


class ErfAttackError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ErfAttackError):
    """Bad graph wiring, shape mismatch, or invalid parameter value."""


class NonFiniteError(ErfAttackError):
    """A tensor picked up a NaN or Inf during an operation."""


class TrainingFailedError(ErfAttackError):
    """Training finished without reaching the detection bar."""

    def __init__(self, message, detection_rate, false_positives_per_image):
        super().__init__(message)
        self.detection_rate = detection_rate
        self.false_positives_per_image = false_positives_per_image


class DegenerateProfileError(ErfAttackError):
    """Gradient energy map is all zero, no crop size can be derived."""


class PgmError(ErfAttackError):
    """Malformed, truncated, or unsupported PGM data."""


class ConfigError(ErfAttackError):
    """Run configuration file failed to parse or validate."""
