"""Exception hierarchy shared across the pipeline."""


class GroundPlanError(Exception):
    """Base class for every error raised by this package."""


class NonPositiveDepth(GroundPlanError, ValueError):
    pass


class InvalidTransform(GroundPlanError, ValueError):
    pass


class InvalidCrop(GroundPlanError, ValueError):
    pass


class FormatError(GroundPlanError, ValueError):
    """A file on disk does not match its declared format."""


class DomainError(GroundPlanError, ValueError):
    pass


class InsufficientNeighbors(GroundPlanError, ValueError):
    pass


class NoValidDepth(GroundPlanError, ValueError):
    pass


class EmptyMask(GroundPlanError, ValueError):
    pass


class NoCandidates(GroundPlanError, ValueError):
    pass


class OutOfBounds(GroundPlanError, ValueError):
    pass


class NoRoi(GroundPlanError, ValueError):
    pass


class MissingPlaceholder(GroundPlanError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"missing placeholder binding: {self.name}"


class ParseError(GroundPlanError, ValueError):
    """Text could not be parsed. ``location`` is a line/column or column hint."""

    def __init__(self, message: str, location=None):
        super().__init__(message)
        self.location = location


class SchemaError(GroundPlanError, ValueError):
    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


class BackendError(GroundPlanError, RuntimeError):
    pass


class ScriptExhausted(BackendError):
    pass


class MaxIterationsExceeded(GroundPlanError, RuntimeError):
    """The prompting loop hit its iteration bound without converging."""

    def __init__(self, message: str, best=None, transcript=None):
        super().__init__(message)
        self.best = best
        self.transcript = transcript or []


class EmptyHistory(GroundPlanError, ValueError):
    pass


class MissingObject(GroundPlanError, KeyError):
    pass


class NoMutableField(GroundPlanError, ValueError):
    pass


class EmptyInput(GroundPlanError, ValueError):
    pass


class ArchiveError(GroundPlanError, OSError):
    """Archive or dataset file could not be written or read."""


class ConfigError(GroundPlanError, ValueError):
    """Invalid or incomplete pipeline configuration."""
