"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array arguments have shapes an operation cannot accept."""


class ContractViolation(RuntimeError):
    """An API precondition was broken (non-scalar backward, bad frame order, ...)."""


class ConfigurationError(ValueError):
    """Bad config key/value, or a state-dict/checkpoint name mismatch."""


class OracleFailure(RuntimeError):
    """A reference computation produced a non-finite or unusable value."""
