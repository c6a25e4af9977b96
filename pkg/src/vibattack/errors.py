"""Exception hierarchy shared across the toolkit."""

from sklearn.exceptions import NotFittedError


class VibAttackError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(VibAttackError, ValueError):
    pass


class LengthError(VibAttackError, ValueError):
    pass


class ParseError(VibAttackError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ConfigurationError(VibAttackError, ValueError):
    pass


class DomainError(VibAttackError, ValueError):
    pass


class DefenseError(ConfigurationError):
    """Raised when a defense transform would be a silent no-op or stack twice."""


class StateError(VibAttackError, RuntimeError):
    pass


class NotTrainedError(StateError, NotFittedError):
    """A model was used before ``fit``/``train`` completed."""


class NumericError(VibAttackError, ArithmeticError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class EvaluationError(VibAttackError, ValueError):
    pass
