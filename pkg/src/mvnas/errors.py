"""Exception types shared across the package.

Every error raised on purpose by this package derives from MvnasError, so
callers (and the command line front end) can distinguish "the input or the
configuration is wrong" from a genuine bug.
"""


class MvnasError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigurationError(MvnasError):
    """A configuration value is out of its legal range or inconsistent."""


class DimensionError(MvnasError):
    """Tensor shapes do not line up for the requested operation."""


class ContractError(MvnasError):
    """An operation was invoked in a way its contract forbids."""


class NumericError(MvnasError):
    """A computation produced or received non-finite or degenerate values."""


class ValidationError(MvnasError):
    """A data structure (genotype, dataset, checkpoint) fails its invariants."""
