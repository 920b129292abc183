"""Exception types shared across the package."""


class NifmError(Exception):
    """Base class for all package errors."""


class FormatError(NifmError):
    """Malformed, truncated, or version-mismatched binary file."""


class ConfigError(NifmError):
    """Invalid run configuration (unknown key, bad value, infeasible request)."""


class DivergenceError(NifmError):
    """Training loss diverged past the guard threshold."""


class NonFiniteError(NifmError):
    """NaN/Inf encountered in a state, gradient, or parameter update."""
