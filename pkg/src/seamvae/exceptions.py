"""Exception hierarchy shared by every module."""


class SeamVAEError(Exception):
    """Base class for all package errors."""


class InvalidInput(SeamVAEError, ValueError):
    pass


class DegenerateSpectrum(SeamVAEError):
    """Singular values or eigenvalues are not separated by the required gap."""


class DegenerateModel(SeamVAEError):
    pass


class NumericalFailure(SeamVAEError, ArithmeticError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class GeometryInconsistent(SeamVAEError):
    pass


class PreconditionFailed(SeamVAEError):
    pass


class CorruptRun(SeamVAEError):
    pass
