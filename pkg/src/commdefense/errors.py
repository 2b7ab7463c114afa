"""Exception types shared across the package."""


class CommDefenseError(Exception):
    """Base class for all package errors."""


class ShapeError(CommDefenseError, ValueError):
    """An input had the wrong shape, width, or index range."""


class ConfigError(CommDefenseError, ValueError):
    """A configuration value or file is invalid."""


class TapeError(CommDefenseError, RuntimeError):
    """A gradient tape was misused (reused after backward, nested, ...)."""


class UsageError(CommDefenseError, RuntimeError):
    """An operation was called on an object that does not support it."""


class CheckpointError(CommDefenseError, ValueError):
    """A checkpoint or dataset file is malformed or inconsistent."""


class TrainingError(CommDefenseError, RuntimeError):
    """Training cannot proceed (divergence, degenerate dataset, ...)."""
