"""Split Gibbs sampling for blind deconvolution.

Joint posterior sampling of an image and its blur kernel by alternating
prior (denoising) and likelihood (Gaussian) conditional updates.
"""

from prism.errors import (
    BadSupport,
    BridgeTimeout,
    DegenerateScale,
    EmptySampleSet,
    InsufficientSamples,
    MalformedResponse,
    PrismError,
    ShapeMismatch,
    SymmetryViolation,
    TooLarge,
    TooSmall,
)
from prism.forward import ForwardModel, Kernel, delta_kernel
from prism.grid import fft2, ifft2, make_rng, read_pgrd, write_pgrd

__version__ = "0.1.0"

__all__ = [
    "BadSupport",
    "BridgeTimeout",
    "DegenerateScale",
    "EmptySampleSet",
    "ForwardModel",
    "InsufficientSamples",
    "Kernel",
    "MalformedResponse",
    "PrismError",
    "ShapeMismatch",
    "SymmetryViolation",
    "TooLarge",
    "TooSmall",
    "delta_kernel",
    "fft2",
    "ifft2",
    "make_rng",
    "read_pgrd",
    "write_pgrd",
]
