"""Exception types raised across the package."""


class VBBError(Exception):
    """Base class for all package errors."""


class ShapeError(VBBError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(VBBError, ValueError):
    """A configuration value violates its contract."""


class ContractError(VBBError, RuntimeError):
    """An operation was called outside its preconditions."""


class DeterminismError(VBBError, RuntimeError):
    """A function expected to be deterministic returned different values."""


class NumericError(VBBError, ArithmeticError):
    """A computation produced a non-finite value."""
