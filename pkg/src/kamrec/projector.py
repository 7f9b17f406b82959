"""Fourier-domain projection: central slices of a volume on polar grids.

A projection image of a volume at orientation R, by the projection-slice
identity, samples the volume transform on the central plane R^T (kx, ky, 0).
Images here live on a polar grid (Gauss-Legendre radii in (0, c], uniform
azimuth), stored as complex values of shape (n_rings, n_phi). Ring weights
carry both the quadrature weight and the k_r measure factor so weighted
sums of |values|^2 approximate the disk integral; a flat mode is exposed
for callers that want plain unweighted sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import basis as _basis
from . import so3 as _so3
from .basis import BasisSpec
from .volume import VolumeCoefficients, evaluate_fourier

_ISO_NORM = 1.0 / (2.0 * math.sqrt(math.pi))  # Y_00


@dataclass(frozen=True)
class PolarGridSpec:
    radii: tuple          # ring radii in cycles per pixel, increasing, <= c
    phis: tuple           # azimuth samples, uniform 2 pi j / n_phi
    weights: tuple        # per-ring weights for Frobenius-type objectives
    bandlimit: float

    @property
    def n_rings(self) -> int:
        return len(self.radii)

    @property
    def n_phi(self) -> int:
        return len(self.phis)

    def radii_array(self) -> np.ndarray:
        return np.asarray(self.radii)

    def weights_array(self) -> np.ndarray:
        return np.asarray(self.weights)

    def phis_array(self) -> np.ndarray:
        return np.asarray(self.phis)


def polar_grid_from_params(bandlimit: float, n_rings: int, n_phi: int,
                           weight_mode: str = "ring") -> PolarGridSpec:
    """Polar sampling from explicit sizes: Gauss-Legendre radii on (0, c],
    uniform azimuth. weight_mode "ring" multiplies the Gauss-Legendre
    weights by k_r (disk measure) and the azimuth step; "flat" uses ones."""
    if n_rings < 1 or n_phi < 4:
        raise ValueError("polar grid too small")
    nodes, gl_weights = np.polynomial.legendre.leggauss(n_rings)
    radii = 0.5 * bandlimit * (nodes + 1.0)
    base = 0.5 * bandlimit * gl_weights
    if weight_mode == "ring":
        weights = base * radii * (2.0 * math.pi / n_phi)
    elif weight_mode == "flat":
        weights = np.ones(n_rings)
    else:
        raise ValueError("weight_mode must be 'ring' or 'flat'")
    phis = 2.0 * math.pi * np.arange(n_phi) / n_phi
    return PolarGridSpec(tuple(radii), tuple(phis), tuple(weights), float(bandlimit))


def polar_grid(spec: BasisSpec, n_rings: int | None = None, n_phi: int | None = None,
               weight_mode: str = "ring") -> PolarGridSpec:
    """Default polar sampling for a basis chart: n_rings = S(0) + 2,
    n_phi = max(2 (2L+1), 64)."""
    if n_rings is None:
        n_rings = spec.s_counts[0] + 2
    if n_phi is None:
        n_phi = max(2 * (2 * spec.max_degree + 1), 64)
    return polar_grid_from_params(spec.bandlimit, n_rings, n_phi, weight_mode)


@dataclass
class FourierSliceImage:
    grid: PolarGridSpec
    values: np.ndarray  # complex, (n_rings, n_phi)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.grid.n_rings, self.grid.n_phi):
            raise ValueError("image values do not match the polar grid")

    def weighted_norm(self) -> float:
        w = self.grid.weights_array()[:, None]
        return float(np.sqrt(np.sum(w * np.abs(self.values) ** 2)))


def _slice_directions(rotations, phis: np.ndarray) -> np.ndarray:
    """Unit directions R^T (cos phi, sin phi, 0), shape (n_rot, n_phi, 3)."""
    mats = _so3.rotation_matrices(rotations)
    eq = np.stack([np.cos(phis), np.sin(phis), np.zeros_like(phis)], axis=-1)
    return np.einsum("rji,pj->rpi", mats, eq)


def project_clean(coeffs: VolumeCoefficients, rotation: _so3.Rotation,
                  grid: PolarGridSpec) -> FourierSliceImage:
    """Noise-free central slice at orientation ``rotation``."""
    return project_clean_stack(coeffs, [rotation], grid)[0]


def project_clean_stack(coeffs: VolumeCoefficients, rotations, grid: PolarGridSpec):
    """Batch of clean slices; one FourierSliceImage per rotation."""
    spec = coeffs.spec
    if grid.bandlimit > spec.bandlimit * (1 + 1e-12):
        raise ValueError("polar grid extends beyond the coefficient bandlimit")
    phis = grid.phis_array()
    radii = grid.radii_array()
    dirs = _slice_directions(rotations, phis)              # (n_rot, n_phi, 3)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi_sph = np.arctan2(dirs[..., 1], dirs[..., 0])
    n_rot, n_phi = theta.shape
    vals = np.zeros((n_rot, len(radii), n_phi), dtype=complex)
    for ell in range(spec.max_degree + 1):
        rad = _basis.radial_matrix(ell, spec.s_counts[ell], radii, spec.bandlimit)
        harm = _basis.harmonic_matrix(ell, theta.ravel(), phi_sph.ravel())
        harm = harm.reshape(2 * ell + 1, n_rot, n_phi)
        contrib = np.einsum("rs,sm,mjp->jrp", rad, coeffs.blocks[ell], harm)
        vals += (1j if ell % 2 else 1.0) * contrib
    return [FourierSliceImage(grid, v) for v in vals]


def project_clean_cartesian(coeffs: VolumeCoefficients, rotation: _so3.Rotation,
                            n: int) -> np.ndarray:
    """Real-space projection image of side n (Fourier slice + inverse FFT)."""
    c = coeffs.spec.bandlimit
    freqs = np.fft.fftfreq(n)
    kx, ky = np.meshgrid(freqs, freqs, indexing="ij")
    kk = np.hypot(kx, ky)
    mask = kk <= c
    pts = np.stack([kx[mask], ky[mask], np.zeros(int(mask.sum()))], axis=-1)
    rot_pts = pts @ rotation.matrix  # rows R^T k
    k = np.linalg.norm(rot_pts, axis=-1)
    with np.errstate(invalid="ignore"):
        ct = np.where(k > 0, rot_pts[:, 2] / np.where(k > 0, k, 1.0), 1.0)
    theta = np.arccos(np.clip(ct, -1.0, 1.0))
    phi = np.arctan2(rot_pts[:, 1], rot_pts[:, 0])
    vals = np.zeros((n, n), dtype=complex)
    vals[mask] = evaluate_fourier(coeffs, k, theta, phi)
    rev = np.conj(np.roll(vals[::-1, ::-1], 1, axis=(0, 1)))
    vals = 0.5 * (vals + rev)
    img = np.fft.ifft2(vals)
    return np.fft.fftshift(img.real)


def image_to_polar(image: np.ndarray, grid: PolarGridSpec, pad_factor: int = 4) -> FourierSliceImage:
    """Convert a centered real-space image to polar Fourier samples.

    FFT with ``pad_factor`` zero padding, then bilinear interpolation at the
    polar points. With pad_factor 4 the measured error against exact slices
    stays below 1e-3 relative for sides >= 109 (see the projector tests).
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError("expected a square 2D image")
    n = image.shape[0]
    big = n * int(pad_factor)
    padded = np.zeros((big, big))
    # The center pixel n//2 must land on big//2, which ifftshift sends to the
    # origin; (big - n)//2 would be one short for odd sides.
    lo = big // 2 - n // 2
    padded[lo:lo + n, lo:lo + n] = image
    spectrum = np.fft.fft2(np.fft.ifftshift(padded))
    radii = grid.radii_array()[:, None]
    phis = grid.phis_array()[None, :]
    kx = radii * np.cos(phis)
    ky = radii * np.sin(phis)
    ix = (kx * big) % big
    iy = (ky * big) % big
    from scipy.ndimage import map_coordinates
    coords = np.stack([ix.ravel(), iy.ravel()])
    re = map_coordinates(spectrum.real, coords, order=1, mode="grid-wrap")
    im = map_coordinates(spectrum.imag, coords, order=1, mode="grid-wrap")
    vals = (re + 1j * im).reshape(grid.n_rings, grid.n_phi)
    return FourierSliceImage(grid, vals)


def add_noise(values: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise with variance = signal power / snr.

    Signal power is the mean squared magnitude over all samples. Complex
    arrays get circular complex noise (half the variance per component);
    snr = inf returns an unchanged copy.
    """
    values = np.asarray(values)
    if snr <= 0:
        raise ValueError("snr must be positive (use inf for noiseless)")
    if not np.isfinite(snr):
        return values.copy()
    power = float(np.mean(np.abs(values) ** 2))
    sigma2 = power / snr
    if np.iscomplexobj(values):
        scale = math.sqrt(sigma2 / 2.0)
        noise = rng.standard_normal(values.shape) + 1j * rng.standard_normal(values.shape)
        return values + scale * noise
    return values + math.sqrt(sigma2) * rng.standard_normal(values.shape)


def radial_average_profile(stack_values: np.ndarray) -> np.ndarray:
    """Mean over images and azimuth of the slice values, per ring (real part).

    For orientations drawn uniformly this estimates the isotropic component,
    which is real under the storage convention; the imaginary part is
    discarded as estimator noise.
    """
    stack_values = np.asarray(stack_values, dtype=complex)
    if stack_values.ndim == 2:
        stack_values = stack_values[None]
    return stack_values.mean(axis=(0, 2)).real


def isotropic_operator(spec: BasisSpec, radii) -> np.ndarray:
    """Matrix sending the degree-0 block column to the isotropic profile."""
    radii = np.asarray(radii, dtype=float)
    return _ISO_NORM * _basis.radial_matrix(0, spec.s_counts[0], radii, spec.bandlimit)


def isotropic_profile(coeffs: VolumeCoefficients, radii) -> np.ndarray:
    """Exact orientation average of clean slices: the l = 0 term only."""
    return isotropic_operator(coeffs.spec, radii) @ coeffs.blocks[0][:, 0]


@dataclass
class SliceDesign:
    """Per-degree linear operators mapping orthogonal factors to slice values.

    With factor blocks F_l and radial matrices J_l on the grid rings,
    ring_ops[l-1] = J_l F_l. The prediction for a candidate set {O_l} on the
    equator (orientation = identity) is

        baseline + sum_l i^(l mod 2) ring_ops[l] @ O_l @ equator rows

    where only the l+1 orders with l+m even survive on the equator; the
    complementary columns of O_l cannot affect the image (exact zeros).
    """

    spec: BasisSpec
    grid: PolarGridSpec
    ring_ops: list          # degree l >= 1: (n_rings, 2l+1)
    equator_active: list    # degree l >= 1: (l+1, n_phi), rows l+m even
    equator_full: list      # degree l >= 1: (2l+1, n_phi) with exact zero rows
    active_cols: list       # degree l >= 1: indices of l+m even columns
    iso_ring_op: np.ndarray  # (n_rings, S(0)), includes the Y_00 constant
    weights: np.ndarray      # (n_rings,)

    def baseline(self, iso_column: np.ndarray) -> np.ndarray:
        """Ring-constant contribution of the isotropic block column."""
        return self.iso_ring_op @ np.asarray(iso_column, dtype=float).reshape(-1)

    def predict_half(self, halves, iso_column) -> np.ndarray:
        """Slice values from half-assignments o_l of shape (2l+1, l+1)."""
        vals = np.zeros((self.grid.n_rings, self.grid.n_phi), dtype=complex)
        vals += self.baseline(iso_column)[:, None]
        for idx, half in enumerate(halves):
            contrib = self.ring_ops[idx] @ half @ self.equator_active[idx]
            vals += (1j if (idx + 1) % 2 else 1.0) * contrib
        return vals

    def predict_full(self, orthogonals, iso_column, dmats=None) -> np.ndarray:
        """Slice values from full O_l, optionally rotated by Wigner blocks.

        ``dmats`` is a list of D_l(R) (degree 1..L); the slice at orientation
        R multiplies D_l(R)^T between O_l and the equatorial harmonics.
        """
        vals = np.zeros((self.grid.n_rings, self.grid.n_phi), dtype=complex)
        vals += self.baseline(iso_column)[:, None]
        for idx, full in enumerate(orthogonals):
            eq = self.equator_full[idx]
            if dmats is not None:
                eq = dmats[idx].T @ eq
            contrib = self.ring_ops[idx] @ full @ eq
            vals += (1j if (idx + 1) % 2 else 1.0) * contrib
        return vals


def slice_design(factor_blocks, spec: BasisSpec, grid: PolarGridSpec) -> SliceDesign:
    """Build the fixed operators for matching and refinement costs."""
    radii = grid.radii_array()
    phis = grid.phis_array()
    ring_ops = []
    eq_active = []
    eq_full = []
    active_cols = []
    for ell in range(1, spec.max_degree + 1):
        rad = _basis.radial_matrix(ell, spec.s_counts[ell], radii, spec.bandlimit)
        ring_ops.append(rad @ np.asarray(factor_blocks[ell], dtype=float))
        full = _basis.equatorial_harmonic_matrix(ell, phis)
        cols = _basis.equatorial_orders(ell) + ell
        eq_full.append(full)
        eq_active.append(full[cols, :])
        active_cols.append(cols)
    iso = isotropic_operator(spec, radii)
    return SliceDesign(
        spec=spec,
        grid=grid,
        ring_ops=ring_ops,
        equator_active=eq_active,
        equator_full=eq_full,
        active_cols=active_cols,
        iso_ring_op=iso,
        weights=grid.weights_array(),
    )
