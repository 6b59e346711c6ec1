"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class DataFormatError(ValueError):
    """A data or checkpoint file does not match its declared format."""


class ChecksumError(DataFormatError):
    """Stored checksum does not match the payload."""


class ConfigError(ValueError):
    """Experiment configuration is malformed or contains unknown keys."""


class DivergenceError(RuntimeError):
    """Training aborted because the batch loss became non-finite."""
