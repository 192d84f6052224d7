"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A parameter or config value violates a documented bound."""


class DomainError(ValueError):
    """A volume carries the wrong value domain for the requested operation."""


class ShapeError(ValueError):
    """Array shapes or geometries disagree."""


class BoundsError(ValueError):
    """A region or coordinate falls outside the image."""


class UndefinedMetricError(ValueError):
    """A metric is mathematically undefined for the given inputs."""


class ConfigurationError(RuntimeError):
    """A run is missing a required artifact or has inconsistent settings."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, task: object = None):
        super().__init__(message)
        self.task = task
