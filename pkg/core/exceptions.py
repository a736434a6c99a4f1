"""Exception hierarchy shared by all services."""
from typing import Optional


class RangewrenchError(Exception):
    """Base error carrying the name of the module that raised it."""

    module: str = "core"

    def __init__(self, detail: str, module: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        if module is not None:
            self.module = module

    def __str__(self) -> str:
        return f"[{self.module}] {self.detail}"


class FormatError(RangewrenchError):
    """A file does not follow its binary or text format."""


class ConsistencyError(RangewrenchError):
    """Companion artifacts disagree (e.g. label count vs point count)."""


class MappingError(RangewrenchError):
    """A label id has no counterpart in the class map."""


class ParameterError(RangewrenchError):
    """An operation parameter violates its documented range."""


class ConfigurationError(RangewrenchError):
    """A configuration is incomplete or contradictory."""


class NumericError(RangewrenchError):
    """A numeric precondition failed (values outside a function's domain)."""


class ShapeError(RangewrenchError):
    """Array shapes do not agree."""
