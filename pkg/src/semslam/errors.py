"""Exception hierarchy shared by all modules."""


class SemSlamError(Exception):
    """Base class for all library errors."""


class ConfigInvalid(SemSlamError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class NonPositiveDepth(SemSlamError):
    pass


class DegenerateConfiguration(SemSlamError):
    pass


class InsufficientInliers(SemSlamError):
    pass


class InsufficientFeatures(SemSlamError):
    def __init__(self, frame, count=None):
        self.frame = frame
        msg = f"frame {frame}"
        if count is not None:
            msg += f" has only {count} depth-valid features"
        super().__init__(msg)


class MissingCameraPose(SemSlamError):
    def __init__(self, frame):
        self.frame = frame
        super().__init__(f"no camera pose for frame {frame}")


class SingularCovariance(SemSlamError):
    pass


class ShapeMismatch(SemSlamError):
    pass


class MismatchedBody(SemSlamError):
    pass


class NotEnoughPairs(SemSlamError):
    pass


class BadDimensions(SemSlamError):
    pass


class NumericalFailure(SemSlamError):
    def __init__(self, block, message="non-finite value"):
        self.block = block
        super().__init__(f"{message} in block {block!r}")


class InsufficientOverlap(SemSlamError):
    pass
