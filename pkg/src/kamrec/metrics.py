"""Volume comparison: global alignment, correlation, shell correlation.

A reconstruction is only defined up to a global rotation and a reflection,
because both leave every autocorrelation matrix unchanged. Comparisons
therefore search SO(3) x {identity, inversion} for the best alignment and
report the correlation at the optimum; inversion acts on coefficients as
(-1)^l per degree block, which composed with rotations covers every
reflection. Shell correlation works on real-space cubes: complex inner
products on concentric frequency shells, normalized per shell.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import so3 as _so3
from .optimizer import OptimizeOptions, minimize
from .validation import FormatError, NumericalError
from .volume import (VolumeCoefficients, VolumeGrid, reflect_coefficients,
                     rotate_coefficients)


@dataclass
class AlignmentResult:
    rotation: _so3.Rotation   # applied to the candidate (after any inversion)
    hand: int                 # +1 kept, -1 inverted
    correlation: float
    aligned: VolumeCoefficients


def _alignment_cost(kernels, max_degree):
    """Cost -sum_l <M_l, D_l(R)> and its SO(3) gradient, for one hand."""
    generators = [_so3.wigner_generators(ell) for ell in range(1, max_degree + 1)]

    def cost_and_grad(point):
        rot = point[0]
        dmats = _so3.real_wigner_d_all(max_degree, rot[None])
        total = 0.0
        gen_coeffs = np.zeros(3)
        for ell in range(1, max_degree + 1):
            d = dmats[ell][0]
            total += float(np.sum(kernels[ell] * d))
            gen_coeffs += np.einsum("jab,ab->j", generators[ell - 1],
                                    d.T @ kernels[ell])
        grad = -rot @ (0.5 * np.einsum("j,jab->ab", gen_coeffs,
                                       _so3.SO3_GENERATORS))
        return -total, [grad]

    return cost_and_grad


def align_globally(reference: VolumeCoefficients, candidate: VolumeCoefficients,
                   *, grid_resolution: float = 0.15, refine_starts: int = 3,
                   options: OptimizeOptions | None = None) -> AlignmentResult:
    """Best rotation and hand assignment of ``candidate`` onto ``reference``.

    The inner product sum_l <A_l, B_l D_l(R)^T> is evaluated on a rotation
    grid for both hands, the few best grid points per hand are polished with
    the analytic gradient, and the winner is returned together with the
    aligned coefficient set and the cosine correlation at the optimum.
    """
    spec = reference.spec
    if candidate.spec != spec:
        raise ValueError("coefficient sets live on different charts")
    ref_norm = reference.norm()
    cand_norm = candidate.norm()
    if ref_norm == 0.0 or cand_norm == 0.0:
        raise NumericalError("correlation undefined for zero-norm coefficients")
    max_degree = spec.max_degree
    if options is None:
        options = OptimizeOptions(max_iter=200)
    rotations, _, dmats = _so3.grid_with_wigner(max_degree, grid_resolution)
    denom = ref_norm * cand_norm

    best = None
    for hand in (1, -1):
        cand = reflect_coefficients(candidate) if hand < 0 else candidate
        kernels = [reference.blocks[ell].T @ cand.blocks[ell]
                   for ell in range(max_degree + 1)]
        const = float(np.sum(kernels[0]))
        scores = np.full(len(rotations), const)
        for ell in range(1, max_degree + 1):
            scores += np.einsum("ij,nij->n", kernels[ell], dmats[ell])
        top = np.argsort(scores, kind="stable")[::-1][:max(1, refine_starts)]
        cost_fn = _alignment_cost(kernels, max_degree)
        for idx in top:
            point, report = minimize(cost_fn, [rotations[idx].matrix], options)
            corr = (const - report.final_cost) / denom
            if best is None or corr > best[0]:
                best = (corr, _so3.Rotation.from_matrix(point[0]), hand)
    corr, rotation, hand = best
    aligned = rotate_coefficients(
        reflect_coefficients(candidate) if hand < 0 else candidate, rotation)
    return AlignmentResult(rotation, hand, float(corr), aligned)


@dataclass
class FscCurve:
    """Per-shell correlation; frequencies in 1/length units of voxel_size.

    Shells with no frequency samples carry value NaN and count 0.
    """

    frequencies: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    voxel_size: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["freq_per_A", "fsc", "shell_count"])
            for f, v, c in zip(self.frequencies, self.values, self.counts):
                writer.writerow([f"{f:.17g}", f"{v:.17g}", int(c)])

    @classmethod
    def from_csv(cls, path, voxel_size: float | None = None) -> "FscCurve":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["freq_per_A", "fsc", "shell_count"]:
                raise FormatError(f"unexpected shell correlation header: {header}")
            rows = [(float(a), float(b), int(c)) for a, b, c in reader]
        if not rows:
            raise FormatError("shell correlation file has no rows")
        freqs = np.array([r[0] for r in rows])
        if voxel_size is None:
            step = freqs[1] - freqs[0] if len(freqs) > 1 else freqs[0]
            nyquist = freqs[-1] + step if step > 0 else 0.5
            voxel_size = 0.5 / nyquist
        return cls(freqs, np.array([r[1] for r in rows]),
                   np.array([r[2] for r in rows], dtype=int), float(voxel_size))


def _cube_data(volume) -> tuple[np.ndarray, float | None]:
    if isinstance(volume, VolumeGrid):
        return volume.data, volume.voxel_size
    return np.asarray(volume, dtype=float), None


def fsc(volume1, volume2, n_shells: int | None = None,
        voxel_size: float | None = None) -> FscCurve:
    """Shell correlation of two equal cubes, ``n_shells`` bins up to Nyquist.

    Shell i collects frequency samples with round(|k| / step) = i, where
    step = Nyquist / n_shells and |k| is in cycles per voxel; its center
    frequency is i * step / voxel_size. The value per shell is
    Re <V1, V2> / sqrt(sum|V1|^2 sum|V2|^2); shells without samples report
    NaN. Default n_shells is n // 2, which leaves no shell empty.
    """
    v1, vox1 = _cube_data(volume1)
    v2, vox2 = _cube_data(volume2)
    if v1.shape != v2.shape or v1.ndim != 3 or len(set(v1.shape)) != 1:
        raise ValueError("expected two equal-shaped cubes")
    if voxel_size is None:
        voxel_size = vox1 if vox1 is not None else (vox2 if vox2 is not None else 1.0)
    n = v1.shape[0]
    if n_shells is None:
        n_shells = n // 2
    if n_shells < 2:
        raise ValueError("at least two shells required")
    f1 = np.fft.fftn(v1)
    f2 = np.fft.fftn(v2)
    freqs = np.fft.fftfreq(n)
    kx, ky, kz = np.meshgrid(freqs, freqs, freqs, indexing="ij")
    step = 0.5 / n_shells
    shell = np.rint(np.sqrt(kx * kx + ky * ky + kz * kz) / step).astype(int)
    mask = shell < n_shells
    idx = shell[mask]
    cross = np.bincount(idx, weights=(f1 * np.conj(f2)).real[mask], minlength=n_shells)
    p1 = np.bincount(idx, weights=np.abs(f1[mask]) ** 2, minlength=n_shells)
    p2 = np.bincount(idx, weights=np.abs(f2[mask]) ** 2, minlength=n_shells)
    counts = np.bincount(idx, minlength=n_shells)
    denom = np.sqrt(p1 * p2)
    safe = denom > 0
    values = np.where(safe, cross / np.where(safe, denom, 1.0), 1.0)
    values = np.where(counts > 0, values, np.nan)
    frequencies = np.arange(n_shells) * (step / voxel_size)
    return FscCurve(frequencies, values, counts, float(voxel_size))


@dataclass
class ResolutionEstimate:
    resolution: float        # in length units (inverse of the frequency)
    frequency: float
    nyquist_limited: bool


def resolution_at_threshold(curve: FscCurve, threshold: float = 0.5) -> ResolutionEstimate:
    """First crossing of the curve below ``threshold``, linearly interpolated.

    Scans populated shells in frequency order; between the last shell above
    and the first at or below the threshold, the crossing frequency is found
    by linear interpolation. A curve that never reaches the threshold is
    Nyquist limited and reports resolution 2 * voxel_size with a flag.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be strictly between 0 and 1")
    vals = np.asarray(curve.values, dtype=float)
    freqs = np.asarray(curve.frequencies, dtype=float)
    counts = np.asarray(curve.counts)
    prev = None  # last populated shell above the threshold
    for i in range(len(vals)):
        if counts[i] == 0 or not np.isfinite(vals[i]):
            continue
        if vals[i] <= threshold:
            if prev is None:
                return ResolutionEstimate(math.inf, 0.0, False)
            j, vj, fj = prev
            t = (vj - threshold) / (vj - vals[i])
            f = fj + t * (freqs[i] - fj)
            return ResolutionEstimate(1.0 / f, f, False)
        prev = (i, vals[i], freqs[i])
    nyquist = 0.5 / curve.voxel_size
    return ResolutionEstimate(2.0 * curve.voxel_size, nyquist, True)
