"""Exception hierarchy shared across the package."""


class MMTransformerError(Exception):
    """Base class for all package errors."""


class ConfigError(MMTransformerError, ValueError):
    """A configuration value is missing, inconsistent, or out of range."""


class ShapeError(MMTransformerError, ValueError):
    """Tensor dimensions do not line up."""


class InvalidValueError(MMTransformerError, ValueError):
    """NaN or infinite values reached an operation boundary."""


class DegenerateMaskError(MMTransformerError, ValueError):
    """An attention query has every key position masked out."""


class ContractError(MMTransformerError, ValueError):
    """A precondition of an operation was violated by the caller."""


class TrainingDivergenceError(MMTransformerError, RuntimeError):
    """Loss or gradients became non-finite during training."""


class SchemaError(MMTransformerError, ValueError):
    """A persisted record is missing a required field."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


class ParseError(MMTransformerError, ValueError):
    """A persisted record could not be decoded."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
