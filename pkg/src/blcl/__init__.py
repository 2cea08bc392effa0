"""Bayesian-weighted contrastive class-incremental learning."""

from blcl.errors import ArtifactError, ConfigError, DataError, DivergenceError

__version__ = "0.1.0"

__all__ = ["ArtifactError", "ConfigError", "DataError", "DivergenceError", "__version__"]
