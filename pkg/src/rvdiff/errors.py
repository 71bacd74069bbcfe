"""Exception types shared across the package."""


class RvdiffError(Exception):
    """Base class for all errors raised by rvdiff."""


class UsageError(RvdiffError, ValueError):
    """Caller violated an API contract (bad shapes, missing inputs, bad config)."""


class DomainError(RvdiffError, ValueError):
    """A numeric input lies outside the domain of an operation."""


class InsufficientDataError(RvdiffError, ValueError):
    """Not enough samples to compute a statistic."""


class FormatError(RvdiffError):
    """A file on disk does not follow the expected binary or JSON layout."""
