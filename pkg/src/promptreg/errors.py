"""Exception hierarchy shared by all promptreg modules."""


class PromptregError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PromptregError):
    """Operand shapes are inconsistent; message names the offending node/op."""


class UnboundInputError(PromptregError):
    """A graph input was not bound to a value before evaluation."""


class NonFiniteError(PromptregError):
    """A computation produced (or was handed) NaN/Inf values."""


class LabelError(PromptregError):
    """A label distribution is invalid (negative mass or not normalized)."""


class DataError(PromptregError):
    """Dataset construction, validation, or parsing failed."""


class ConfigError(PromptregError):
    """A run configuration is invalid or inconsistent with the regime."""
