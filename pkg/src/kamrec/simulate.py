"""Synthetic data generation: random phantoms, Haar-distributed viewing
directions, clean or noisy polar projection stacks, and the exact per-degree
autocorrelation matrices the retrieval stage consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autocorr import AutocorrSpectrum, spectrum_from_coefficients
from .basis import BasisSpec
from .projector import (FourierSliceImage, PolarGridSpec, add_noise, polar_grid,
                        project_clean_stack, radial_average_profile)
from .so3 import Rotation, angular_distance, sample_uniform_rotations
from .volume import VolumeCoefficients


def random_phantom(spec: BasisSpec, seed, degree_decay: float = 1.0) -> VolumeCoefficients:
    """Random bandlimited coefficients with unit norm.

    Blocks are standard normal scaled by (1 + l)^(-degree_decay) so higher
    degrees contribute progressively less, mimicking the decay of smooth
    densities; the whole set is then normalized.
    """
    rng = np.random.default_rng(seed)
    blocks = []
    for ell in range(spec.max_degree + 1):
        scale = (1.0 + ell) ** (-float(degree_decay))
        blocks.append(scale * rng.standard_normal((spec.s_counts[ell], 2 * ell + 1)))
    coeffs = VolumeCoefficients(spec, blocks)
    norm = coeffs.norm()
    return VolumeCoefficients(spec, [b / norm for b in coeffs.blocks])


def sample_rotation_pair(seed, min_angle: float = 0.3,
                         max_angle: float = math.pi - 0.3):
    """Haar pair of rotations conditioned on a relative-angle window.

    Rejection sampling keeps the pair Haar-distributed within the window and
    stays deterministic per seed.
    """
    if not 0.0 <= min_angle < max_angle <= math.pi:
        raise ValueError("need 0 <= min_angle < max_angle <= pi")
    seq = (seed if isinstance(seed, np.random.SeedSequence)
           else np.random.SeedSequence(seed))
    while True:
        child = seq.spawn(1)[0]
        first, second = sample_uniform_rotations(2, child)
        if min_angle <= angular_distance(first, second) <= max_angle:
            return first, second


@dataclass
class SimulatedDataset:
    """Everything one synthetic run produces, kept in memory."""

    coefficients: VolumeCoefficients
    rotations: list
    grid: PolarGridSpec
    images: list               # what downstream consumes (noisy if snr finite)
    clean_images: list
    spectrum: AutocorrSpectrum
    profile_radii: np.ndarray  # ring radii
    profile_values: np.ndarray  # stack-averaged isotropic profile estimate


def simulate_dataset(spec: BasisSpec, n_images: int, *, snr: float = math.inf,
                     seed=0, grid: PolarGridSpec | None = None,
                     rotations=None, degree_decay: float = 1.0) -> SimulatedDataset:
    """Full synthetic pipeline input: phantom, projections, exact spectrum.

    The spectrum is computed from the phantom coefficients, not estimated
    from the images, so it is exact regardless of n_images. The radial
    profile is the stack average, which converges to the isotropic component
    as n_images grows (noise averages out in the mean).
    """
    if n_images < 1 and rotations is None:
        raise ValueError("n_images must be >= 1")
    if grid is None:
        grid = polar_grid(spec)
    seq = np.random.SeedSequence(seed)
    phantom_seed, rotation_seed, noise_seed = seq.spawn(3)
    coeffs = random_phantom(spec, phantom_seed, degree_decay)
    if rotations is None:
        rotations = sample_uniform_rotations(n_images, rotation_seed)
    else:
        rotations = list(rotations)
    clean = project_clean_stack(coeffs, rotations, grid)
    if math.isinf(snr):
        images = [FourierSliceImage(grid, img.values.copy()) for img in clean]
    else:
        rng = np.random.default_rng(noise_seed)
        images = [FourierSliceImage(grid, add_noise(img.values, snr, rng))
                  for img in clean]
    stack_values = np.stack([img.values for img in images])
    profile = radial_average_profile(stack_values)
    return SimulatedDataset(
        coefficients=coeffs,
        rotations=rotations,
        grid=grid,
        images=images,
        clean_images=clean,
        spectrum=spectrum_from_coefficients(coeffs),
        profile_radii=grid.radii_array(),
        profile_values=profile,
    )
