"""Non-rigid shape registration as Gaussian process regression.

CPD, BCPD and two non-rigid ICP variants are expressed as one loop:
estimate correspondences, regress a low-rank Gaussian process deformation
model on them, update, repeat. The loop runs deterministically or as a
Metropolis-Hastings sampler that also yields posterior uncertainty.
"""

from .estimator import GingrRegistration
from .exceptions import (
    ConfigError,
    FormatError,
    GingrError,
    KernelError,
    NumericalError,
    UnsupportedOperationError,
    ValidationError,
)
from .geometry import Landmark, PointSet, SimilarityTransform, TriangleMesh, umeyama_align
from .gpmm import LowRankGp, build_low_rank, load_model, regress, save_model
from .kernels import (
    DotProductKernel,
    GaussianKernel,
    InverseLaplacianKernel,
    StatisticalKernel,
    combine,
    icp_a_kernel,
    symmetric_kernel,
)
from .meshio import load_geometry, load_landmarks, save_geometry
from .registration import (
    PosteriorChain,
    ProbabilisticSpec,
    RegistrationConfig,
    RegistrationError,
    RegistrationResult,
    posterior_uncertainty,
    preset,
    register_deterministic,
    register_multires,
    register_probabilistic,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DotProductKernel", "FormatError", "GaussianKernel", "GingrError", "GingrRegistration",
    "InverseLaplacianKernel", "KernelError", "Landmark", "LowRankGp", "NumericalError", "PointSet",
    "PosteriorChain", "ProbabilisticSpec", "RegistrationConfig", "RegistrationError", "RegistrationResult",
    "SimilarityTransform", "StatisticalKernel", "TriangleMesh", "UnsupportedOperationError", "ValidationError",
    "build_low_rank", "combine", "icp_a_kernel", "load_geometry", "load_landmarks", "load_model",
    "posterior_uncertainty", "preset", "regress", "register_deterministic", "register_multires",
    "register_probabilistic", "save_geometry", "save_model", "symmetric_kernel", "umeyama_align",
]
