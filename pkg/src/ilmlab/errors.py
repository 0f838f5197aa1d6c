"""Exception types shared across the package."""


class IlmLabError(Exception):
    """Base class for all ilmlab errors."""


class ShapeError(IlmLabError, ValueError):
    """Operand shapes are incompatible; the message names both shapes."""


class InputError(IlmLabError, ValueError):
    """An input value is unusable (empty corpus, zero frames, guard exceeded)."""


class ConfigError(IlmLabError, ValueError):
    """A configuration is inconsistent or references unknown keys."""


class UsageError(IlmLabError, RuntimeError):
    """An operation was called on the wrong variant or in the wrong state."""


class FormatError(IlmLabError, ValueError):
    """A serialized file is malformed.

    ``byte_offset`` locates the offending region in the file.
    """

    def __init__(self, message: str, byte_offset: int = 0):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class TrainingError(IlmLabError, RuntimeError):
    """Training diverged; ``epoch`` is the 0-based epoch where it happened."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class FreezeViolation(IlmLabError, RuntimeError):
    """A parameter that must stay frozen was modified."""


class ArtifactMismatch(IlmLabError, RuntimeError):
    """Two artifacts that must belong together do not (e.g. hash mismatch)."""


class MissingArtifact(IlmLabError, RuntimeError):
    """A required input artifact is absent; the message names it."""
