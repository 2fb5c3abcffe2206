"""Self-supervised Siamese pre-training and transfer evaluation for
remote-sensing scene classification."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    ManifestError,
    RsslError,
    StoreError,
    TrainingDiverged,
)

__all__ = [
    "ConfigurationError",
    "DegenerateInputError",
    "DimensionError",
    "ManifestError",
    "RsslError",
    "StoreError",
    "TrainingDiverged",
    "__version__",
]
