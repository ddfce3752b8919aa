"""Error types shared across the simulator."""
from __future__ import annotations


class ConfigError(ValueError):
    """A configuration value is inconsistent or out of range."""


class SchemaError(ValueError):
    """An input file does not match the expected column layout."""


class ParseError(ValueError):
    """A cell in an input file cannot be interpreted."""


class EmptyPartError(ValueError):
    """A split produced an empty mandatory part."""


class MissingClassError(ValueError):
    """A class required by a balance target is absent from the data."""


class PoisonedUpdateError(RuntimeError):
    """A model update contains non-finite values."""


class ModelKindError(TypeError):
    """An operation received a model of the wrong kind."""
