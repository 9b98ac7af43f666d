"""Exception hierarchy shared by every egl_lab module."""


class EglLabError(Exception):
    """Base class for all library errors."""


class InputError(EglLabError, ValueError):
    """Malformed or inconsistent inputs (shapes, ranges, fractions)."""


class ConfigError(EglLabError, ValueError):
    """Invalid experiment, sampler or training configuration."""


class CapabilityError(EglLabError):
    """The requested operation is not supported for these inputs."""


class SolverError(EglLabError):
    """A downstream solver failed to converge.

    Carries the iteration count, the best iterate found and its duality gap
    so callers can decide whether the result is still usable.
    """

    def __init__(self, message, iterations=None, best=None, gap=None):
        super().__init__(message)
        self.iterations = iterations
        self.best = best
        self.gap = gap


class DegenerateBaselineError(EglLabError):
    """Normalized DQ is undefined because perfect and random DQ coincide."""


class TrainingError(EglLabError):
    """Non-finite loss encountered during optimization."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FittingError(TrainingError):
    """Non-finite value while fitting loss parameters."""
