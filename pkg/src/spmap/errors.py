"""Exception hierarchy shared by all modules."""


class SpmError(Exception):
    """Base class for library errors."""


class FitError(SpmError):
    """A regression or hyperparameter fit could not be carried out."""


class DomainError(SpmError, ValueError):
    """Arc length or point outside the path domain."""


class OutOfCorridorError(SpmError):
    """Point farther than e_max from the path."""


class AmbiguousProjectionError(SpmError):
    """Two distinct global minimizers of the path distance."""


class HorizonError(SpmError):
    """Pixel ray parallel to the ground plane."""


class BehindCameraError(SpmError):
    """Pixel ray meets the ground plane behind the camera."""


class CoverageError(SpmError):
    """No support point within kernel range of the query."""


class DegenerateMomentsError(SpmError):
    """Moment set has a vanishing Jensen gap and no exact fallback."""


class NumericalError(SpmError, ArithmeticError):
    """Matrix factorization failed even after jitter."""


class EvaluationError(SpmError):
    """Metric undefined for the given inputs."""


class ConfigError(SpmError, ValueError):
    """Invalid experiment configuration."""
