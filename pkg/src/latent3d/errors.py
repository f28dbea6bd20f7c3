"""Exception hierarchy.

The CLI maps ``DataError`` subclasses to exit status 2 and ``NumericError``
subclasses to exit status 3.
"""


class Latent3DError(Exception):
    pass


class DataError(Latent3DError):
    pass


class NumericError(Latent3DError):
    pass


class MalformedLatentBlock(DataError):
    pass


class IllegalTokenInText(DataError):
    pass


class InfeasibleConfig(DataError):
    pass


class UnsupportedKindForScene(DataError):
    pass


class CorruptRecord(DataError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        super().__init__(f"corrupt record at line {line}: {reason}".rstrip(": "))


class ShapeMismatch(DataError):
    pass


class SequenceTooLong(DataError):
    pass


class ViewSceneMismatch(DataError):
    pass


class GroupTooSmall(DataError):
    pass


class LengthMismatch(DataError):
    pass


class NonPositiveTruth(DataError):
    pass


class NoLatentBlockEmitted(DataError):
    pass


class IoFailure(DataError):
    pass


class ConfigHashMismatch(DataError):
    pass


class MissingComponent(DataError):
    pass


class UnknownAxis(DataError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")


class NonFiniteObjective(NumericError):
    def __init__(self, step: int, value: float, dump_path: str | None = None):
        self.step = step
        self.value = value
        self.dump_path = dump_path
        super().__init__(f"non-finite objective {value!r} at step {step}")


class DegenerateVector(NumericError):
    pass
