class EmbodiedError(Exception):
    """Base class for all errors raised by this package."""


class LogParseError(EmbodiedError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(EmbodiedError):
    """Dimensions or step indexing inconsistent within an episode."""


class ValidationError(EmbodiedError):
    """A value is out of its allowed range (non-finite, non-positive, ...)."""


class InsufficientLengthError(EmbodiedError):
    """Episode or chunk too short for the requested quantity."""


class DomainError(EmbodiedError):
    """Joint configuration outside the arm's limits."""


class ConfigurationError(EmbodiedError):
    """Scenario, task or controller settings that cannot be simulated."""


class TrainingDivergedError(EmbodiedError):
    def __init__(self, message, policy=None, history=None):
        super().__init__(message)
        self.policy = policy
        self.history = history
