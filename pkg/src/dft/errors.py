"""Exception types shared across the package."""


class DFTError(Exception):
    """Base class for all package errors."""


class ShapeError(DFTError):
    """Operands have incompatible dimensions for the requested op."""


class ContractError(DFTError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConfigError(DFTError):
    """Invalid or unknown configuration values."""


class DataError(DFTError):
    """Dataset files are missing, malformed, or inconsistent with their manifest."""


class NumericalError(DFTError):
    """A non-finite value appeared where a finite one is required."""
