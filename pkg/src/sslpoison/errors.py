"""Exception types shared across the package.

Plain argument problems raise ``ValueError``; the classes below mark failures
that callers usually want to distinguish (bad config, unreadable data, a
training run that diverged).
"""


class ConfigError(ValueError):
    """Unknown identifier or inconsistent configuration."""


class LoadError(OSError):
    """A dataset file is missing or corrupt."""


class AttackError(RuntimeError):
    """An attack could not be crafted (e.g. its surrogate diverged)."""


class TrainingError(RuntimeError):
    """Non-finite loss during training. Carries the trace recorded so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ScoringError(ValueError):
    """Density scoring impossible, e.g. no reference samples for a class."""
