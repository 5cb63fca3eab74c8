"""Decoder-Jacobian geometry and diagonal-posterior Gaussian VAEs in numpy."""
from .estimators import PPCA, GaussianVAE
from .exceptions import (CorruptRun, DegenerateModel, DegenerateSpectrum, GeometryInconsistent,
                         InvalidInput, NumericalFailure, PreconditionFailed, SeamVAEError)

__version__ = "0.1.0"

__all__ = [
    "PPCA", "GaussianVAE", "SeamVAEError", "InvalidInput", "NumericalFailure",
    "DegenerateSpectrum", "DegenerateModel", "GeometryInconsistent", "PreconditionFailed",
    "CorruptRun", "__version__",
]
