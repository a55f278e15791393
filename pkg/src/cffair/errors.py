"""Exception hierarchy shared across the package."""


class CfFairError(Exception):
    """Base class for all package errors."""


class DimensionError(CfFairError, ValueError):
    pass


class DomainError(CfFairError, ValueError):
    pass


class NonFiniteError(CfFairError, FloatingPointError):
    """Raised when a loss, gradient or parameter update is not finite.

    ``node`` names the first operation found to produce a non-finite value,
    when it could be located.
    """

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"{message} (first non-finite op: {node})")
        self.node = node


class UnsupportedVariantError(CfFairError):
    pass


class ConfigError(CfFairError, ValueError):
    pass


class DataError(CfFairError, ValueError):
    pass


class SchemaError(DataError):
    pass


class CapabilityError(CfFairError):
    pass
