"""Desk-scale model stitching lab: anchors, probes, KL similarity, stitch selection."""

from stitchlab.errors import (
    ConfigError,
    FormatError,
    InvalidInputError,
    MissingArtifactError,
    NumericError,
    StaleArtifactError,
    StateError,
    StitchLabError,
    UndefinedCorrelationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "InvalidInputError",
    "MissingArtifactError",
    "NumericError",
    "StaleArtifactError",
    "StateError",
    "StitchLabError",
    "UndefinedCorrelationError",
    "__version__",
]
