"""Input-validation helpers and shared error types."""

from __future__ import annotations

import numpy as np


class NumericalError(RuntimeError):
    """Raised when a computation is numerically unusable (CLI exit code 4)."""


class FormatError(Exception):
    """Raised for corrupt or unsupported file contents (CLI exit code 3)."""


def as_real_array(values, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got {arr.ndim}")
    return arr


def check_square(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square, got shape {mat.shape}")
    return mat


def check_symmetric(mat: np.ndarray, name: str, tol: float = 1e-10) -> np.ndarray:
    mat = check_square(mat, name)
    scale = max(1.0, float(np.max(np.abs(mat))))
    if float(np.max(np.abs(mat - mat.T))) > tol * scale:
        raise ValueError(f"{name} is not symmetric")
    return mat


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_block_shapes(blocks, s_counts, name: str) -> None:
    if len(blocks) != len(s_counts):
        raise ValueError(f"{name}: expected {len(s_counts)} degree blocks, got {len(blocks)}")
    for ell, block in enumerate(blocks):
        want = (s_counts[ell], 2 * ell + 1)
        if tuple(np.shape(block)) != want:
            raise ValueError(
                f"{name}: degree {ell} block has shape {np.shape(block)}, expected {want}"
            )
