"""Volumes as coefficient blocks: Fourier evaluation, grid synthesis, and
least-squares expansion of sampled grids back into coefficients.

Coefficient storage follows the reality convention from :mod:`kamrec.basis`:
``blocks[l]`` is the real matrix of shape (S(l), 2l+1) whose (s, m+l) entry,
multiplied by i^(l mod 2), is the coefficient a_{lms}. Frequencies are in
cycles per pixel, so synthesis and expansion pair with unit-spaced real
grids via plain FFTs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis as _basis
from . import so3 as _so3
from .basis import BasisSpec
from .validation import NumericalError, check_block_shapes


@dataclass
class VolumeCoefficients:
    spec: BasisSpec
    blocks: list

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=float) for b in self.blocks]
        check_block_shapes(self.blocks, self.spec.s_counts, "coefficients")

    def copy(self) -> "VolumeCoefficients":
        return VolumeCoefficients(self.spec, [b.copy() for b in self.blocks])

    def pack(self) -> np.ndarray:
        """All stored real values as one flat vector (row-major per block)."""
        return np.concatenate([b.ravel() for b in self.blocks])

    def norm(self) -> float:
        return float(np.linalg.norm(self.pack()))

    @classmethod
    def zeros(cls, spec: BasisSpec) -> "VolumeCoefficients":
        return cls(spec, [np.zeros(spec.block_shape(l)) for l in range(spec.max_degree + 1)])


@dataclass
class VolumeGrid:
    data: np.ndarray          # real (n, n, n), origin at the center voxel
    voxel_size: float = 1.0   # physical pitch, used only for unit conversion

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or len(set(self.data.shape)) != 1:
            raise ValueError("volume grid must be a cube")


def _spherical_from_cartesian(points: np.ndarray):
    k = np.linalg.norm(points, axis=-1)
    with np.errstate(invalid="ignore"):
        ct = np.where(k > 0, points[..., 2] / np.where(k > 0, k, 1.0), 1.0)
    theta = np.arccos(np.clip(ct, -1.0, 1.0))
    phi = np.arctan2(points[..., 1], points[..., 0])
    return k, theta, phi


def evaluate_fourier(coeffs: VolumeCoefficients, k, theta, phi) -> np.ndarray:
    """Evaluate the expanded transform at spherical frequency points.

    Points with k > c are rejected; callers mask to the ball first. Returns
    complex values (even degrees feed the real part, odd degrees the
    imaginary part).
    """
    spec = coeffs.spec
    k = np.atleast_1d(np.asarray(k, dtype=float))
    theta = np.broadcast_to(np.asarray(theta, dtype=float), k.shape)
    phi = np.broadcast_to(np.asarray(phi, dtype=float), k.shape)
    if np.any(k > spec.bandlimit * (1 + 1e-12)):
        raise ValueError("evaluation point outside the bandlimit ball")
    out = np.zeros(k.shape, dtype=complex)
    for ell in range(spec.max_degree + 1):
        rad = _basis.radial_matrix(ell, spec.s_counts[ell], k, spec.bandlimit)
        harm = _basis.harmonic_matrix(ell, theta, phi)
        contrib = np.einsum("ps,sm,mp->p", rad, coeffs.blocks[ell], harm)
        out += (1j if ell % 2 else 1.0) * contrib
    return out


def evaluate_fourier_at_directions(coeffs: VolumeCoefficients, k, directions) -> np.ndarray:
    """Same as evaluate_fourier but with unit direction vectors (..., 3)."""
    d = np.asarray(directions, dtype=float)
    _, theta, phi = _spherical_from_cartesian(d)
    return evaluate_fourier(coeffs, k, theta, phi)


def rotate_coefficients(coeffs: VolumeCoefficients, rotation: _so3.Rotation) -> VolumeCoefficients:
    """Coefficients of the actively rotated volume, x -> volume(R^-1 x).

    Blocks transform as A_l -> A_l D_l(R)^T with the Wigner convention from
    :mod:`kamrec.so3`.
    """
    dmats = _so3.real_wigner_d_all(coeffs.spec.max_degree, rotation.matrix[None])
    blocks = [coeffs.blocks[l] @ dmats[l][0].T for l in range(coeffs.spec.max_degree + 1)]
    return VolumeCoefficients(coeffs.spec, blocks)


def reflect_coefficients(coeffs: VolumeCoefficients) -> VolumeCoefficients:
    """Coefficients of the inverted volume x -> volume(-x) (hand flip).

    Real harmonics have parity (-1)^l, so degree blocks flip sign for odd l.
    """
    blocks = [b if l % 2 == 0 else -b for l, b in enumerate(coeffs.blocks)]
    return VolumeCoefficients(coeffs.spec, blocks)


def _ball_points(n: int, c: float):
    freqs = np.fft.fftfreq(n)
    kx, ky, kz = np.meshgrid(freqs, freqs, freqs, indexing="ij")
    kk = np.sqrt(kx * kx + ky * ky + kz * kz)
    mask = kk <= c
    pts = np.stack([kx[mask], ky[mask], kz[mask]], axis=-1)
    return mask, pts, kk[mask]


def _hermitian_symmetrize(vals: np.ndarray) -> np.ndarray:
    rev = np.conj(np.roll(vals[::-1, ::-1, ::-1], 1, axis=(0, 1, 2)))
    return 0.5 * (vals + rev)


def synthesize_real_grid(coeffs: VolumeCoefficients, n: int, voxel_size: float = 1.0) -> VolumeGrid:
    """Sample the transform on the FFT frequency grid inside the ball (zero
    outside) and inverse transform to a centered real cube of side n."""
    if n < 3:
        raise ValueError("grid side must be at least 3")
    if n < 2 * coeffs.spec.support_radius:
        raise ValueError("grid side must cover twice the support radius")
    c = coeffs.spec.bandlimit
    mask, pts, kmag = _ball_points(n, c)
    k, theta, phi = _spherical_from_cartesian(pts)
    vals = np.zeros((n, n, n), dtype=complex)
    vals[mask] = evaluate_fourier(coeffs, k, theta, phi)
    vals = _hermitian_symmetrize(vals)
    grid = np.fft.ifftn(vals)
    resid = float(np.max(np.abs(grid.imag)) / max(np.max(np.abs(grid.real)), 1e-300))
    if resid > 1e-10:
        raise NumericalError(f"imaginary residual {resid:.2e} after synthesis")
    return VolumeGrid(np.fft.fftshift(grid.real), voxel_size)


def _parity_design(spec: BasisSpec, parity: int, k, theta, phi):
    """Column blocks of the ball-sampled design matrix for one parity class.

    Yields (ell, matrix) with matrix shape (npoints, S(l) * (2l+1)), columns
    ordered row-major to match VolumeCoefficients.pack().
    """
    for ell in range(parity, spec.max_degree + 1, 2):
        rad = _basis.radial_matrix(ell, spec.s_counts[ell], k, spec.bandlimit)
        harm = _basis.harmonic_matrix(ell, theta, phi)
        block = rad[:, :, None] * harm.T[:, None, :]
        yield ell, block.reshape(k.size, -1)


def expand_from_grid(grid: VolumeGrid, spec: BasisSpec, chunk: int = 16384):
    """Least-squares projection of a real cube onto the coefficient basis.

    The cube is FFT'd, samples inside the bandlimit ball are collected, and
    the two parity classes are fit separately (even degrees against the real
    part, odd against the imaginary part; the complex problem decouples
    exactly). Normal equations are accumulated in point chunks; the normal
    matrix condition number is reported and > 1e8 raises NumericalError.

    Returns (VolumeCoefficients, diagnostics dict).
    """
    data = np.asarray(grid.data, dtype=float)
    n = data.shape[0]
    vals_grid = np.fft.fftn(np.fft.ifftshift(data))
    mask, pts, _ = _ball_points(n, spec.bandlimit)
    k, theta, phi = _spherical_from_cartesian(pts)
    vals = vals_grid[mask]
    blocks = [np.zeros(spec.block_shape(l)) for l in range(spec.max_degree + 1)]
    diagnostics = {}
    for parity, target in ((0, vals.real), (1, vals.imag)):
        degrees = list(range(parity, spec.max_degree + 1, 2))
        if not degrees:
            continue
        widths = [spec.s_counts[l] * (2 * l + 1) for l in degrees]
        total = sum(widths)
        normal = np.zeros((total, total))
        rhs = np.zeros(total)
        for start in range(0, k.size, chunk):
            sl = slice(start, min(start + chunk, k.size))
            cols = [m for _, m in _parity_design(
                spec, parity, k[sl], theta[sl], phi[sl])]
            design = np.concatenate(cols, axis=1)
            normal += design.T @ design
            rhs += design.T @ target[sl]
        eigvals, eigvecs = np.linalg.eigh(normal)
        cond = float(eigvals[-1] / max(eigvals[0], 1e-300))
        key = "even" if parity == 0 else "odd"
        diagnostics[f"condition_{key}"] = cond
        if eigvals[0] <= 0 or cond > 1e8:
            raise NumericalError(
                f"normal system for {key} degrees is ill-conditioned (cond {cond:.3e}); "
                "lower max_degree or enlarge the grid"
            )
        solution = eigvecs @ ((eigvecs.T @ rhs) / eigvals)
        offset = 0
        for ell, width in zip(degrees, widths):
            blocks[ell] = solution[offset:offset + width].reshape(spec.block_shape(ell))
            offset += width
        resid = float(solution @ normal @ solution - 2.0 * solution @ rhs + target @ target)
        diagnostics[f"residual_{key}"] = np.sqrt(max(resid, 0.0)) / max(np.linalg.norm(target), 1e-300)
    coeffs = VolumeCoefficients(spec, blocks)
    return coeffs, diagnostics


def coefficient_correlation(a: VolumeCoefficients, b: VolumeCoefficients) -> float:
    """Cosine similarity of two coefficient sets over the same chart."""
    if a.spec.s_counts != b.spec.s_counts or a.spec.bandlimit != b.spec.bandlimit:
        raise ValueError("coefficient charts do not match")
    va, vb = a.pack(), b.pack()
    denom = np.linalg.norm(va) * np.linalg.norm(vb)
    if denom == 0:
        raise NumericalError("correlation undefined for zero coefficients")
    return float(np.dot(va, vb) / denom)
