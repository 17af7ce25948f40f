"""Exception types shared across the package."""


class EvsplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(EvsplatError, ValueError):
    """A parameter value is outside the domain of an operation."""


class ContractError(EvsplatError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericError(EvsplatError, FloatingPointError):
    """Non-finite values appeared in parameters or losses."""
