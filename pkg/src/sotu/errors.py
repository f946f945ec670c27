"""Exception hierarchy shared across the package."""


class SotuError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatchError(SotuError):
    """Two tensors (or a tensor and an expected layout) disagree in shape."""


class NameMismatchError(SotuError):
    """Two checkpoints do not contain the same set of tensor names."""


class NonFiniteError(SotuError):
    """A NaN or infinity appeared where only finite values are allowed."""


class FormatError(SotuError):
    """A serialized file is malformed (bad magic, version, or truncation)."""


class InvalidProbabilityError(SotuError):
    """A probability argument lies outside [0, 1]."""


class BaseMismatchError(SotuError):
    """A sparse delta's base fingerprint does not match the given checkpoint."""


class ZeroDeltaError(SotuError):
    """Cosine similarity requested for an all-zero delta."""


class ZeroFeatureError(SotuError):
    """Cosine-based classification requested for an all-zero feature vector."""


class EmptyBatchError(SotuError):
    """A dataset or batch contains no examples."""


class EmptyListError(SotuError):
    """An operation requiring at least one element received an empty list."""


class EmptyPrototypeSetError(SotuError):
    """Prediction requested against a prototype set with no classes."""


class UnknownClassError(SotuError):
    """A class id recurred across tasks or is absent where required."""


class TooFewClassesError(SotuError):
    """A task stream was requested with more tasks than available classes."""


class PipelineStageError(SotuError):
    """A pipeline stage failed; carries the stage name and the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
