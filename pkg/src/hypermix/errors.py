"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2; everything else that escapes is a
runtime/numeric failure and maps to exit code 3.
"""


class ConfigError(Exception):
    """Bad configuration: unknown keys, invalid tokens, impossible settings."""


class DimensionError(ValueError):
    """Array shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class SamplingError(RuntimeError):
    """A random draw cannot be satisfied (empty pool, too few samples)."""


class AggregationError(RuntimeError):
    """Weight aggregation impossible (a class received zero total mass)."""


class MetricError(ValueError):
    """A metric was requested on degenerate inputs (e.g. an empty score list)."""
