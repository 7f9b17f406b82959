"""Per-degree autocorrelation matrices and their factorization.

Under the storage convention (degree-l blocks carry an implicit i^(l mod 2)),
the autocorrelation of a coefficient set is the real symmetric PSD matrix

    C_l = A_l A_l^T,   shape (S(l), S(l)).

C_l determines A_l only up to an orthogonal right factor: any F_l with
F_l F_l^T = C_l satisfies A_l = F_l O_l for some O_l in O(2l+1). This module
computes C_l from coefficients, factorizes measured C_l into canonical
factors, and perturbs spectra for robustness experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec
from .validation import NumericalError, check_symmetric
from .volume import VolumeCoefficients


@dataclass
class AutocorrSpectrum:
    """Stack of per-degree autocorrelation matrices for one basis chart."""

    spec: BasisSpec
    matrices: list  # degree l: (S(l), S(l)) real symmetric PSD

    def __post_init__(self):
        if len(self.matrices) != self.spec.max_degree + 1:
            raise ValueError("one matrix per degree 0..max_degree required")
        fixed = []
        for ell, mat in enumerate(self.matrices):
            mat = np.asarray(mat, dtype=float)
            s = self.spec.s_counts[ell]
            if mat.shape != (s, s):
                raise ValueError(f"degree {ell} matrix must be {s}x{s}, got {mat.shape}")
            fixed.append(mat)
        self.matrices = fixed

    def copy(self) -> "AutocorrSpectrum":
        return AutocorrSpectrum(self.spec, [m.copy() for m in self.matrices])


@dataclass
class FactorSet:
    """Canonical factors F_l with F_l F_l^T = C_l, zero-padded to 2l+1 columns."""

    spec: BasisSpec
    blocks: list       # degree l: (S(l), 2l+1)
    ranks: tuple       # numerical rank of each C_l

    def factor(self, ell: int) -> np.ndarray:
        return self.blocks[ell]


def spectrum_from_coefficients(coeffs: VolumeCoefficients) -> AutocorrSpectrum:
    """Exact autocorrelation of known coefficients: C_l = A_l A_l^T."""
    mats = [blk @ blk.T for blk in coeffs.blocks]
    return AutocorrSpectrum(coeffs.spec, mats)


def factorize_spectrum(spectrum: AutocorrSpectrum, *, negative_tol: float = 1e-6,
                       rank_tol: float = 1e-12) -> FactorSet:
    """Eigenvalue factorization of each C_l into (S(l), 2l+1) factors.

    Eigenvalues below -negative_tol * ||C_l||_2 raise NumericalError; small
    negative values are clamped to zero. Columns are sqrt(lambda) v, ordered
    by decreasing eigenvalue, each eigenvector sign-fixed so its largest-
    magnitude entry is positive, and the factor zero-padded (or truncated,
    when S(l) > 2l+1 columns would exceed the width) to exactly 2l+1 columns.
    """
    blocks = []
    ranks = []
    for ell, mat in enumerate(spectrum.matrices):
        check_symmetric(mat, name=f"autocorrelation matrix (degree {ell})")
        width = 2 * ell + 1
        eigvals, eigvecs = np.linalg.eigh(mat)
        scale = max(float(eigvals[-1]), 0.0)
        if eigvals[0] < -negative_tol * max(scale, 1e-300):
            raise NumericalError(
                f"degree {ell} autocorrelation has eigenvalue {eigvals[0]:.3e}, "
                "too negative to be a valid PSD matrix")
        eigvals = np.clip(eigvals, 0.0, None)[::-1]
        eigvecs = eigvecs[:, ::-1]
        for j in range(eigvecs.shape[1]):
            col = eigvecs[:, j]
            pivot = np.argmax(np.abs(col))
            if col[pivot] < 0:
                eigvecs[:, j] = -col
        rank = int(np.sum(eigvals > rank_tol * max(scale, 1e-300)))
        ranks.append(rank)
        k = min(width, eigvals.size)
        factor = np.zeros((mat.shape[0], width))
        factor[:, :k] = eigvecs[:, :k] * np.sqrt(eigvals[:k])
        blocks.append(factor)
    return FactorSet(spectrum.spec, blocks, tuple(ranks))


def perturb_spectrum(spectrum: AutocorrSpectrum, rel_noise: float,
                     seed: int | np.random.Generator = 0) -> AutocorrSpectrum:
    """Symmetric Gaussian perturbation of each C_l at a relative Frobenius level.

    Per degree, a symmetrized standard Gaussian matrix is scaled so its
    Frobenius norm equals rel_noise * ||C_l||_F, added, and the sum projected
    back to the PSD cone (eigenvalue clamping). rel_noise = 0 returns a copy.
    """
    if rel_noise < 0:
        raise ValueError("rel_noise must be non-negative")
    if rel_noise == 0:
        return spectrum.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for mat in spectrum.matrices:
        raw = rng.standard_normal(mat.shape)
        sym = 0.5 * (raw + raw.T)
        norm = np.linalg.norm(sym)
        if norm > 0:
            sym *= rel_noise * np.linalg.norm(mat) / norm
        noisy = mat + sym
        eigvals, eigvecs = np.linalg.eigh(noisy)
        eigvals = np.clip(eigvals, 0.0, None)
        out.append((eigvecs * eigvals) @ eigvecs.T)
    return AutocorrSpectrum(spectrum.spec, out)
