"""Exception types shared across the package.

The CLI maps these onto exit codes: config problems exit with 2,
failed checks with 1, I/O trouble with 3.
"""


class LoopRlError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LoopRlError):
    """Invalid configuration value or argument outside its domain."""


class ShapeError(LoopRlError):
    """Array dimensions do not match what an operation requires."""


class TapeError(LoopRlError):
    """A backward pass was given a cotangent that does not match its tape."""


class NumericError(LoopRlError):
    """Non-finite values where finite arithmetic is required."""


class StalenessError(LoopRlError):
    """On-policy data requested from a policy snapshot that has moved on."""


class ContractError(LoopRlError):
    """A trajectory is missing data an estimator needs (e.g. stored log-probs)."""


class RewardLookupError(LoopRlError):
    """Unknown reward name requested from the registry."""
