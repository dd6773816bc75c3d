"""Exception types raised across the package."""


class StpsmError(Exception):
    """Base class for all package errors."""


class DegenerateShape(StpsmError):
    pass


class IndexOutOfRange(StpsmError, IndexError):
    pass


class OutOfBounds(StpsmError):
    pass


class ProjectionFailure(StpsmError):
    pass


class InvalidSpec(StpsmError, ValueError):
    pass


class DegenerateConfiguration(StpsmError):
    pass


class NonFiniteObjective(StpsmError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class SingularInnovation(StpsmError):
    pass


class SingularPrediction(StpsmError):
    pass


class RankDeficientStatistics(StpsmError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class NonFinite(StpsmError):
    pass


class InvalidArgument(StpsmError, ValueError):
    pass


class ShapeMismatch(StpsmError, ValueError):
    pass


class InvalidFraction(StpsmError, ValueError):
    pass


class DegenerateEnsemble(StpsmError):
    pass


class ConfigError(StpsmError, ValueError):
    pass
