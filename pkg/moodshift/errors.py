"""
Moodshift Errors
================

Exception hierarchy shared by every stage of the pipeline.

Validation errors map to CLI exit code 1, runtime failures to exit code 2.
"""

from typing import Optional


class MoodshiftError(Exception):
    """Base class for all moodshift errors."""
    exit_code = 2


class ValidationError(MoodshiftError, ValueError):
    """Input data, configuration or arguments failed validation."""
    exit_code = 1


class CatalogFormatError(ValidationError):
    """Embedding or metadata file does not match the catalog format."""

    def __init__(self, message: str, path: Optional[str] = None, row: Optional[int] = None):
        self.path = path
        self.row = row
        location = f" ({path})" if path else ""
        super().__init__(f"{message}{location}")


class ConfigError(ValidationError):
    """Configuration file is missing, malformed or holds an invalid field."""

    def __init__(self, message: str, path: Optional[str] = None, field: Optional[str] = None):
        self.path = path
        self.field = field
        context = []
        if field:
            context.append(f"field '{field}'")
        if path:
            context.append(f"in {path}")
        suffix = f" ({' '.join(context)})" if context else ""
        super().__init__(f"{message}{suffix}")


class DimensionMismatchError(ValidationError):
    """Embedding dimension or mood count disagrees between two artifacts."""


class LossInputError(ValidationError):
    """Loss inputs contain a zero-norm row or invalid hyperparameters."""


class SplitError(ValidationError):
    """A split cannot be produced or does not fit the catalog."""


class TrainingDivergedError(MoodshiftError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, step: int, value: float):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"Training diverged at epoch {epoch}, step {step}: loss={value}")


class NonFiniteGradientError(MoodshiftError):
    """An optimizer step received a non-finite gradient."""

    def __init__(self, tensor: str):
        self.tensor = tensor
        super().__init__(f"Non-finite gradient in tensor '{tensor}'")
