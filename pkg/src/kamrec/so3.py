"""Rotations, Haar sampling, deterministic covering grids, and real Wigner
matrices for real spherical harmonics.

Convention pinned here and relied on everywhere else: ``real_wigner_d(l, R)``
returns the matrix D_l(R) satisfying, for every unit direction w,

    Y_l(R @ w) = D_l(R) @ Y_l(w)

with Y_l the column vector (Y_{l,-l}, ..., Y_{l,l}) of real spherical
harmonics from :mod:`kamrec.basis`. This makes D a group homomorphism,
D_l(R1 @ R2) = D_l(R1) @ D_l(R2), and left-multiplying a coefficient column
by D_l(R) rotates the expanded function actively by R. Central slices of a
volume at orientation R therefore carry D_l(R)^T on the right of the
coefficient blocks.

The matrices are built degree by degree with the corrected recursion of
Ivanic and Ruedenberg, which stays in the real basis throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_AXIS_PERM = (1, 2, 0)  # real l=1 harmonics order as (y, z, x)


@dataclass(frozen=True)
class Rotation:
    """Proper rotation stored as a unit quaternion (w, x, y, z) with w >= 0."""

    quaternion: tuple[float, float, float, float]

    @classmethod
    def from_quaternion(cls, q) -> "Rotation":
        q = np.asarray(q, dtype=float).reshape(4)
        n = float(np.linalg.norm(q))
        if n < 1e-12:
            raise ValueError("quaternion norm too small")
        q = q / n
        q = _canonical_quaternion(q)
        return cls(tuple(float(v) for v in q))

    @classmethod
    def from_matrix(cls, mat) -> "Rotation":
        mat = np.asarray(mat, dtype=float)
        if mat.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if abs(np.linalg.det(mat) - 1.0) > 1e-6:
            raise ValueError("matrix determinant is not +1")
        if np.max(np.abs(mat.T @ mat - np.eye(3))) > 1e-6:
            raise ValueError("matrix is not orthogonal")
        return cls.from_quaternion(_matrix_to_quaternion(mat))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @property
    def matrix(self) -> np.ndarray:
        return quaternion_to_matrix(np.asarray(self.quaternion))

    def apply(self, vectors) -> np.ndarray:
        """Rotate 3-vectors (last axis length 3)."""
        v = np.asarray(vectors, dtype=float)
        return v @ self.matrix.T

    def compose(self, other: "Rotation") -> "Rotation":
        """Rotation equal to applying ``other`` first, then ``self``."""
        return Rotation.from_quaternion(
            _quaternion_multiply(np.asarray(self.quaternion), np.asarray(other.quaternion))
        )

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quaternion
        return Rotation.from_quaternion((w, -x, -y, -z))

    @property
    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        return 2.0 * math.acos(min(1.0, abs(self.quaternion[0])))


def _canonical_quaternion(q: np.ndarray) -> np.ndarray:
    for v in q:
        if v > 0:
            return q
        if v < 0:
            return -q
    raise ValueError("zero quaternion")


def _quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quaternion_to_matrix(q) -> np.ndarray:
    """Unit quaternion(s) (..., 4) to rotation matrix (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    mat = np.empty(q.shape[:-1] + (3, 3))
    mat[..., 0, 0] = 1 - 2 * (y * y + z * z)
    mat[..., 0, 1] = 2 * (x * y - z * w)
    mat[..., 0, 2] = 2 * (x * z + y * w)
    mat[..., 1, 0] = 2 * (x * y + z * w)
    mat[..., 1, 1] = 1 - 2 * (x * x + z * z)
    mat[..., 1, 2] = 2 * (y * z - x * w)
    mat[..., 2, 0] = 2 * (x * z - y * w)
    mat[..., 2, 1] = 2 * (y * z + x * w)
    mat[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return mat


def _matrix_to_quaternion(m: np.ndarray) -> np.ndarray:
    t = np.trace(m)
    if t > 0:
        r = math.sqrt(1.0 + t)
        s = 0.5 / r
        return np.array([0.5 * r,
                         (m[2, 1] - m[1, 2]) * s,
                         (m[0, 2] - m[2, 0]) * s,
                         (m[1, 0] - m[0, 1]) * s])
    i = int(np.argmax(np.diag(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    r = math.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
    s = 0.5 / r
    q = np.empty(4)
    q[0] = (m[k, j] - m[j, k]) * s
    q[1 + i] = 0.5 * r
    q[1 + j] = (m[j, i] + m[i, j]) * s
    q[1 + k] = (m[k, i] + m[i, k]) * s
    return q


def angular_distance(a: Rotation, b: Rotation) -> float:
    """Relative rotation angle between two rotations, in [0, pi]."""
    dot = abs(float(np.dot(a.quaternion, b.quaternion)))
    return 2.0 * math.acos(min(1.0, dot))


def sample_uniform_rotations(count: int, seed) -> list[Rotation]:
    """Haar-uniform rotations from normalized 4D Gaussians (w >= 0 canonical).

    ``seed`` may be an int or a numpy Generator; streams are deterministic
    for a given seed.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    while len(out) < count:
        q = rng.standard_normal(4)
        n = np.linalg.norm(q)
        if n < 1e-12:
            continue
        out.append(Rotation.from_quaternion(q / n))
    return out


# Covering-constant calibration for the layered Hopf grid: a Fibonacci sphere
# with n points has empirical covering radius below 2.6/sqrt(n); the fiber
# contributes half its step. Both are kept under resolution/sqrt(2).
_FIB_COVER = 2.6


def _fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count)
    z = 1.0 - (2.0 * i + 1.0) / count
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    phi = i * golden
    return theta, phi


def so3_grid(resolution: float = 0.15) -> list[Rotation]:
    """Deterministic covering grid of SO(3) via the Hopf fibration.

    Layers a Fibonacci sphere covering (base of the fibration) with a uniform
    circle in the fiber angle, sized so the covering radius in rotation-angle
    distance stays below ``resolution``. The identity is always element 0.
    """
    if resolution <= 0 or resolution > math.pi:
        raise ValueError("resolution must lie in (0, pi]")
    target = resolution / math.sqrt(2.0)
    n_sphere = max(2, int(math.ceil((_FIB_COVER / target) ** 2)))
    n_fiber = max(3, int(math.ceil(math.pi / target)))
    theta, phi = _fibonacci_sphere(n_sphere)
    psi = 2.0 * math.pi * np.arange(n_fiber) / n_fiber
    half_t = 0.5 * theta[:, None]
    half_p = 0.5 * psi[None, :]
    quats = np.empty((n_sphere, n_fiber, 4))
    quats[..., 0] = np.cos(half_t) * np.cos(half_p)
    quats[..., 1] = np.cos(half_t) * np.sin(half_p)
    quats[..., 2] = np.sin(half_t) * np.cos(phi[:, None] + half_p)
    quats[..., 3] = np.sin(half_t) * np.sin(phi[:, None] + half_p)
    quats = quats.reshape(-1, 4)
    grid = [Rotation.identity()]
    grid.extend(Rotation.from_quaternion(q) for q in quats)
    return grid


def rotation_matrices(rotations) -> np.ndarray:
    """Stack rotation matrices, shape (n, 3, 3)."""
    return np.stack([r.matrix for r in rotations])


def _wigner_next(prev: np.ndarray, d1: np.ndarray, ell: int) -> np.ndarray:
    """One step of the real-basis recursion, batched over the leading axis.

    ``prev`` has shape (B, 2l-1, 2l-1) and ``d1`` (B, 3, 3) in harmonic order
    (m = -1, 0, 1); returns (B, 2l+1, 2l+1).
    """
    B = prev.shape[0]
    size = 2 * ell + 1
    out = np.zeros((B, size, size))
    top = 2 * ell - 2  # column index of m' = l-1 inside prev

    def p_term(i, a, b):
        col_i = d1[:, i + 1, :]
        row_a = prev[:, a + ell - 1, :]
        if b == ell:
            return col_i[:, 2] * row_a[:, top] - col_i[:, 0] * row_a[:, 0]
        if b == -ell:
            return col_i[:, 2] * row_a[:, 0] + col_i[:, 0] * row_a[:, top]
        return col_i[:, 1] * row_a[:, b + ell - 1]

    for m in range(-ell, ell + 1):
        dm0 = 1 if m == 0 else 0
        am = abs(m)
        for n in range(-ell, ell + 1):
            denom = (2 * ell) * (2 * ell - 1) if abs(n) == ell else (ell + n) * (ell - n)
            uu = (ell + m) * (ell - m)
            vv = (1 + dm0) * (ell + am - 1) * (ell + am)
            ww = (ell - am - 1) * (ell - am)
            acc = 0.0
            if uu > 0:
                acc = math.sqrt(uu / denom) * p_term(0, m, n)
            if vv > 0:
                cv = 0.5 * math.sqrt(vv / denom) * (1 - 2 * dm0)
                if m == 0:
                    term = p_term(1, 1, n) + p_term(-1, -1, n)
                elif m > 0:
                    term = p_term(1, m - 1, n) * math.sqrt(1 + (1 if m == 1 else 0))
                    if m != 1:
                        term = term - p_term(-1, -m + 1, n)
                else:
                    term = p_term(-1, -m - 1, n) * math.sqrt(1 + (1 if m == -1 else 0))
                    if m != -1:
                        term = p_term(1, m + 1, n) + term
                acc = acc + cv * term
            if ww > 0:
                cw = -0.5 * math.sqrt(ww / denom) * (1 - dm0)
                if m > 0:
                    term = p_term(1, m + 1, n) + p_term(-1, -m - 1, n)
                else:
                    term = p_term(1, m - 1, n) - p_term(-1, -m + 1, n)
                acc = acc + cw * term
            out[:, m + ell, n + ell] = acc
    return out


def real_wigner_d_all(max_degree: int, matrices) -> list[np.ndarray]:
    """Real Wigner matrices for degrees 0..max_degree, batched.

    ``matrices`` is (B, 3, 3); returns a list whose l-th entry has shape
    (B, 2l+1, 2l+1). Using the batch form amortizes the recursion across a
    rotation grid.
    """
    mats = np.asarray(matrices, dtype=float)
    if mats.ndim == 2:
        mats = mats[None]
    B = mats.shape[0]
    blocks = [np.ones((B, 1, 1))]
    if max_degree == 0:
        return blocks
    d1 = mats[:, _AXIS_PERM, :][:, :, _AXIS_PERM]
    blocks.append(d1)
    for ell in range(2, max_degree + 1):
        blocks.append(_wigner_next(blocks[ell - 1], d1, ell))
    return blocks


def real_wigner_d(ell: int, rotation: Rotation) -> np.ndarray:
    """Real Wigner matrix D_ell(R) with Y_ell(R w) = D_ell(R) Y_ell(w)."""
    return real_wigner_d_all(ell, rotation.matrix[None])[ell][0]


@lru_cache(maxsize=64)
def _real_from_complex(ell: int) -> np.ndarray:
    """Unitary U with Y^real = U @ Y^complex (physics complex harmonics)."""
    size = 2 * ell + 1
    u = np.zeros((size, size), dtype=complex)
    u[ell, ell] = 1.0
    rt = 1.0 / math.sqrt(2.0)
    for m in range(1, ell + 1):
        sign = -1.0 if m % 2 else 1.0
        u[ell + m, ell + m] = sign * rt
        u[ell + m, ell - m] = rt
        u[ell - m, ell + m] = -1j * sign * rt
        u[ell - m, ell - m] = 1j * rt
    return u


SO3_GENERATORS = np.array([
    [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],   # E_x
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],   # E_y
    [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],   # E_z
])

_GRID_CACHE: dict = {}


def grid_with_wigner(max_degree: int, resolution: float = 0.15):
    """Rotation grid, quaternion array, and Wigner blocks, cached by key.

    Returns (rotations, quaternions (n, 4), dmats) where dmats[l] has shape
    (n, 2l+1, 2l+1). Grid search over relative orientations and global
    alignment both reuse this; the cache makes repeated reconstructions on
    the same chart cheap.
    """
    key = (int(max_degree), float(resolution))
    hit = _GRID_CACHE.get(key)
    if hit is None:
        rotations = so3_grid(resolution)
        quats = np.array([r.quaternion for r in rotations])
        dmats = real_wigner_d_all(max_degree, rotation_matrices(rotations))
        hit = (rotations, quats, dmats)
        _GRID_CACHE[key] = hit
    return hit


@lru_cache(maxsize=64)
def wigner_generators(ell: int) -> np.ndarray:
    """Exact generators G (3, 2l+1, 2l+1) with d/dt D_ell(exp(t E_j)) = G[j].

    E_x, E_y, E_z are the standard 3x3 skew generators. Derived from the
    angular-momentum ladder matrices in the complex basis and conjugated into
    the real basis; the result is real and skew-symmetric.
    """
    size = 2 * ell + 1
    m = np.arange(-ell, ell + 1, dtype=float)
    lz = np.diag(m)
    lp = np.zeros((size, size))
    for i, mm in enumerate(m[:-1]):
        lp[i + 1, i] = math.sqrt(ell * (ell + 1) - mm * (mm + 1))
    lm = lp.T
    lx = 0.5 * (lp + lm)
    ly = (lp - lm) / 2j
    u = _real_from_complex(ell)
    uh = u.conj().T
    gens = []
    for lam in (1j * lx, (1j * ly).T, 1j * lz):
        g = u @ lam @ uh
        if np.max(np.abs(g.imag)) > 1e-10:
            raise AssertionError("generator failed to come out real")
        gens.append(g.real)
    return np.stack(gens)
