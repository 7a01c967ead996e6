"""Exception hierarchy shared by every module of the package."""


class LoraXsError(Exception):
    """Base class for all errors raised by ``loraxs``."""


class ShapeError(LoraXsError, ValueError):
    pass


class ParameterError(LoraXsError, ValueError):
    pass


class NumericError(LoraXsError, ArithmeticError):
    pass


class ConvergenceError(NumericError):
    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class TrainingDivergedError(NumericError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss


class StateError(LoraXsError, RuntimeError):
    pass


class FormatError(LoraXsError, ValueError):
    pass


class IntegrityError(LoraXsError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SerializationError(LoraXsError, ValueError):
    pass


class BaseModelMismatchError(LoraXsError):
    pass


class RankMismatchError(LoraXsError, ValueError):
    pass


class MissingModuleError(LoraXsError, KeyError):
    def __init__(self, names):
        self.names = sorted(names)
        super().__init__("missing modules: " + ", ".join(self.names))

    def __str__(self):
        return self.args[0]


class RangeError(LoraXsError, OverflowError):
    pass
