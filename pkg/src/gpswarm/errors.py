"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes; library callers can catch the
base class or the specific kind they care about.
"""


class GpSwarmError(Exception):
    """Base class for all errors raised by this package."""


class InputError(GpSwarmError, ValueError):
    """Malformed caller input: wrong dimension, non-finite values, bad range."""


class CapacityError(GpSwarmError):
    """Requested basis size exceeds what the spectrum supports numerically."""


class EmptyStateError(GpSwarmError):
    """An estimator query that requires data was issued on an empty state."""


class NumericalError(GpSwarmError):
    """A linear solve or factorization failed beyond the jitter ladder."""


class PlanningInfeasibleError(GpSwarmError):
    """The tree search root has no open action left (agent fully boxed in)."""


class ConfigError(GpSwarmError):
    """Configuration file is missing, unparsable, or violates the schema."""


class DataError(GpSwarmError):
    """A dataset file is missing or its contents are malformed."""
