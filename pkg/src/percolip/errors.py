"""Exception types shared across the package.

All of them derive from ``ValueError`` so callers that only care about
"bad input" can catch that.
"""


class PercolipError(ValueError):
    """Base class for errors raised by percolip."""


class SizeError(PercolipError):
    """Requested point count is too large to materialize."""


class DisconnectedError(PercolipError):
    """A graph problem has vertices that cannot be reached from the data."""


class ConvergenceError(PercolipError):
    """An iterative solver did not reach its tolerance."""


class ConfigError(PercolipError):
    """Invalid run configuration (unknown key, missing key, bad type)."""
