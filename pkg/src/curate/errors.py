"""Exception hierarchy shared by every module.

All errors derive from :class:`CurateError`; the CLI maps them to exit code 2.
"""


class CurateError(Exception):
    """Base class for data and contract errors."""


class ZeroVector(CurateError, ValueError):
    def __init__(self, id_):
        super().__init__(f"zero-norm vector for id {id_}")
        self.id = id_


class DimensionMismatch(CurateError, ValueError):
    pass


class ShapeMismatch(CurateError, ValueError):
    pass


class LengthMismatch(CurateError, ValueError):
    pass


class EmptyBase(CurateError, ValueError):
    pass


class EmptySet(CurateError, ValueError):
    pass


class EmptyPool(CurateError, ValueError):
    pass


class EmptyInput(CurateError, ValueError):
    pass


class EmptyTrain(CurateError, ValueError):
    pass


class BadSubspaceCount(CurateError, ValueError):
    pass


class InsufficientData(CurateError, ValueError):
    pass


class BadNprobe(CurateError, ValueError):
    pass


class UnknownId(CurateError, KeyError):
    pass


class ModelPoolMismatch(CurateError, ValueError):
    pass


class MissingSource(CurateError, LookupError):
    pass


class NonFinite(CurateError, FloatingPointError):
    pass


class MaskOutOfRange(CurateError, IndexError):
    pass


class TooFewPoints(CurateError, ValueError):
    pass


class StepOutOfRange(CurateError, ValueError):
    pass


class BadRate(CurateError, ValueError):
    pass


class DegenerateLabels(CurateError, ValueError):
    pass


class DegenerateVariance(CurateError, ValueError):
    pass


class FormatError(CurateError, ValueError):
    """Malformed EMB1 / model / spec file."""


class PipelineError(CurateError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
