"""Exception types raised across the pipeline."""


class LesionSegError(Exception):
    """Base class for all package errors."""


class ConstantVolume(LesionSegError, ValueError):
    pass


class EmptyBrain(LesionSegError, ValueError):
    pass


class TooFewSubjects(LesionSegError, ValueError):
    pass


class TooFewSamples(LesionSegError, ValueError):
    pass


class BatchTooSmall(LesionSegError, ValueError):
    pass


class ZeroVector(LesionSegError, ValueError):
    pass


class ShapeMismatch(LesionSegError, ValueError):
    pass


class EmptyMask(LesionSegError, ValueError):
    pass


class BadConfig(LesionSegError, ValueError):
    pass


class HeadsAbsent(LesionSegError, RuntimeError):
    pass


class SchemaMismatch(LesionSegError, ValueError):
    pass


class MissingFile(LesionSegError, FileNotFoundError):
    pass


class StrategyMismatch(LesionSegError, ValueError):
    pass


class ConfigError(LesionSegError, ValueError):
    """Invalid user configuration. ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class NoResults(LesionSegError, FileNotFoundError):
    pass
