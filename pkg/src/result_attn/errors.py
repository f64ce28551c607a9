"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model or run configuration (bad key, value, or contradiction)."""


class DatasetError(ValueError):
    """Dataset files missing, truncated, or malformed."""


class TrainingDiverged(RuntimeError):
    """Training aborted because the loss became non-finite."""


class NumericsError(RuntimeError):
    """Non-finite activations encountered during a forward pass."""


class GradientCheckError(RuntimeError):
    """A gradient under verification was non-finite."""
