"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


class InputError(ValueError):
    """Bad user-supplied data (token ids, record pairs, ...)."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""
