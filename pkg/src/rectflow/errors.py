"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RectFlowError(Exception):
    exit_code = 1


class InputError(RectFlowError, ValueError):
    """Malformed argument: wrong shape, empty batch, out-of-range index."""

    exit_code = 2


class ConfigError(InputError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


class StateError(RectFlowError, RuntimeError):
    exit_code = 7


class MissingInputError(RectFlowError, FileNotFoundError):
    exit_code = 3


class LineageError(RectFlowError):
    """Artifact hashes disagree with what the caller claims produced them."""

    exit_code = 4


class UsageError(RectFlowError):
    """Operation called on the wrong kind of stage (one-step vs continuous)."""

    exit_code = 5


class TrainingError(RectFlowError, ArithmeticError):
    exit_code = 6

    def __init__(self, message, index=None, step=None):
        self.index = index
        self.step = step
        super().__init__(message)


class SimulationError(RectFlowError, ArithmeticError):
    exit_code = 6

    def __init__(self, message, step=None, index=None):
        self.step = step
        self.index = index
        super().__init__(message)


class FormatError(RectFlowError):
    """File does not carry the expected magic, version or header."""

    exit_code = 8
