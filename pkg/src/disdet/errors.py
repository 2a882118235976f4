"""Exception types shared across the package."""


class DisdetError(Exception):
    """Base class for all package errors."""


class ConfigError(DisdetError):
    """Invalid configuration value; message names the offending field."""


class DatasetError(DisdetError):
    """Dataset directory is missing, corrupt, or inconsistent."""


class CheckpointError(DisdetError):
    """Checkpoint file is unreadable or built for a different config."""


class LeakGuardError(DisdetError):
    """Target annotations reached an adaptation training step."""


class TrainAbortError(DisdetError):
    """Training aborted on a non-finite loss; message names the term."""


class StatsError(DisdetError):
    """Too few samples for a statistically meaningful estimate."""
