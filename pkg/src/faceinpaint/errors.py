"""Exception hierarchy shared across the package."""


class FaceInpaintError(Exception):
    pass


class ParameterError(FaceInpaintError, ValueError):
    pass


class ShapeError(FaceInpaintError, ValueError):
    pass


class MaskError(FaceInpaintError, ValueError):
    pass


class OrderingError(FaceInpaintError, ValueError):
    pass


class NumericError(FaceInpaintError, ArithmeticError):
    pass


class PreconditionError(FaceInpaintError, ValueError):
    pass


class RequestError(FaceInpaintError, ValueError):
    pass


class LoadError(FaceInpaintError, OSError):
    pass


class ClientError(FaceInpaintError, RuntimeError):
    """A captioner or parser client failed for one sample."""


class ProbeTrainingError(FaceInpaintError, RuntimeError):
    pass
