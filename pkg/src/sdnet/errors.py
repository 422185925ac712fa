"""Exception types shared across the package."""


class SDNetError(Exception):
    """Base class for all package errors."""


class IngestionError(SDNetError):
    """A volume file is missing or unreadable."""


class MetadataError(SDNetError):
    """A volume file lacks required metadata (e.g. pixel spacing)."""


class ShapeError(SDNetError):
    """Array shapes are inconsistent with the operation's contract."""


class UsageError(SDNetError):
    """An operation was called outside its contract (e.g. missing loss term)."""


class ConfigError(SDNetError):
    """A training configuration is invalid or infeasible."""


class CheckpointError(SDNetError):
    """A checkpoint file is corrupt or incompatible with the current model."""


class TrainingError(SDNetError):
    """Training produced a non-finite loss; carries the diagnostic report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class LeakageError(SDNetError):
    """Evaluation subjects overlap with training subjects."""
