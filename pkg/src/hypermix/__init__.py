"""Few-shot out-of-distribution detection on synthetic data: a hypernetwork
generates episode classifiers from support embeddings, mixing augmentations
regularize meta-training, and a suite of scoring baselines plus an exact
metric harness reproduce the evaluation protocol at desk scale."""

__version__ = "0.1.0"

from .errors import (AggregationError, ConfigError, DimensionError,
                     DomainError, MetricError, SamplingError)

__all__ = [
    "__version__",
    "AggregationError", "ConfigError", "DimensionError",
    "DomainError", "MetricError", "SamplingError",
]
