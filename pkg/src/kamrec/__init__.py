"""Ab initio 3D reconstruction from per-degree autocorrelation matrices plus
two clean projection images, with a full synthetic pipeline for validation.

The public surface re-exports the main types and operations; submodules stay
importable for the long tail (quadrature helpers, Wigner matrices, formats).
"""

from .autocorr import (AutocorrSpectrum, FactorSet, factorize_spectrum,
                       perturb_spectrum, spectrum_from_coefficients)
from .basis import BasisSpec
from .estimator import KamReconstructor
from .metrics import (AlignmentResult, FscCurve, ResolutionEstimate,
                      align_globally, fsc, resolution_at_threshold)
from .projector import (FourierSliceImage, PolarGridSpec, add_noise,
                        image_to_polar, polar_grid, project_clean,
                        project_clean_stack, radial_average_profile)
from .retrieval import (ReconstructionResult, match_image_pair,
                        match_single_image, merge_by_grid_search, procrustes,
                        reconstruct, recover_isotropic_component, refine_joint)
from .simulate import random_phantom, sample_rotation_pair, simulate_dataset
from .so3 import Rotation, real_wigner_d, sample_uniform_rotations, so3_grid
from .validation import FormatError, NumericalError
from .volume import (VolumeCoefficients, VolumeGrid, coefficient_correlation,
                     evaluate_fourier, expand_from_grid, rotate_coefficients,
                     reflect_coefficients, synthesize_real_grid)

__version__ = "1.0.0"

__all__ = [
    "AlignmentResult",
    "AutocorrSpectrum",
    "BasisSpec",
    "FactorSet",
    "FormatError",
    "FourierSliceImage",
    "FscCurve",
    "KamReconstructor",
    "NumericalError",
    "PolarGridSpec",
    "ReconstructionResult",
    "ResolutionEstimate",
    "Rotation",
    "VolumeCoefficients",
    "VolumeGrid",
    "add_noise",
    "align_globally",
    "coefficient_correlation",
    "evaluate_fourier",
    "expand_from_grid",
    "factorize_spectrum",
    "fsc",
    "image_to_polar",
    "match_image_pair",
    "match_single_image",
    "merge_by_grid_search",
    "perturb_spectrum",
    "polar_grid",
    "procrustes",
    "project_clean",
    "project_clean_stack",
    "radial_average_profile",
    "random_phantom",
    "real_wigner_d",
    "reconstruct",
    "recover_isotropic_component",
    "refine_joint",
    "reflect_coefficients",
    "resolution_at_threshold",
    "rotate_coefficients",
    "sample_rotation_pair",
    "sample_uniform_rotations",
    "simulate_dataset",
    "so3_grid",
    "spectrum_from_coefficients",
    "synthesize_real_grid",
    "__version__",
]
