"""Exception types shared across the package."""


class RsslError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RsslError):
    """Invalid model spec or experiment configuration."""


class DimensionError(RsslError):
    """Tensor shapes disagree with the model or data contract."""


class DegenerateInputError(RsslError):
    """Numerically degenerate input (zero-norm vector, empty batch, ...)."""


class ManifestError(RsslError):
    """Dataset manifest fails validation against its declared layout."""


class StoreError(RsslError):
    """Metrics store constraint violation (duplicate id, bad record)."""


class TrainingDiverged(RsslError):
    """Non-finite loss during training. Carries the offending step context."""

    def __init__(self, message, iteration=None, batch_ids=None, collapse_stat=None):
        super().__init__(message)
        self.iteration = iteration
        self.batch_ids = list(batch_ids) if batch_ids is not None else None
        self.collapse_stat = collapse_stat
