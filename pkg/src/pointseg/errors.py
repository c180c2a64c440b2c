"""Error taxonomy shared across the package.

ValidationError maps to CLI exit code 2, NumericError to exit code 3.
"""


class PointsegError(Exception):
    pass


class ValidationError(PointsegError):
    """Bad inputs, malformed files, inconsistent configuration."""


class NumericError(PointsegError):
    """NaN/Inf or tolerance failures during numeric computation."""
