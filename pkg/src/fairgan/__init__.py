"""Fairness-aware GAN training, latent-space rebalancing and fairness metrics on numpy."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    DataError,
    FairGANError,
    FormatError,
    MissingArtifactError,
    NumericalError,
    QualityError,
    ScarcityError,
    UsageError,
)
