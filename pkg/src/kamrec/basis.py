"""Orthonormal basis for volumes whose Fourier transform lives in a centered ball.

A volume transform F is expanded over the ball |k| <= c as

    F(k, theta, phi) = sum_{l=0}^{L} sum_{m=-l}^{l} sum_{s=1}^{S(l)}
                       a_{lms} * Y_{lm}(theta, phi) * f_{ls}(k)

Every other module relies on the exact conventions fixed here:

* ``Y_{lm}`` are real spherical harmonics, orthonormal on the unit sphere,
  cosine azimuth for m > 0, sine azimuth for m < 0, and no Condon-Shortley
  phase in the real assembly:

      Y_{l,0}          = N_{l,0} * P_{l,0}(cos theta)
      Y_{l,m},  m > 0  = sqrt(2) * N_{l,m} * P_{l,m}(cos theta) * cos(m phi)
      Y_{l,-m}, m > 0  = sqrt(2) * N_{l,m} * P_{l,m}(cos theta) * sin(m phi)

  with N_{l,m} = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!) and P_{l,m} the unsigned
  associated Legendre function (so Y_{1,1} = sqrt(3/4pi) * x on the sphere).

* ``f_{ls}`` are normalized spherical Bessel functions

      f_{ls}(k) = sqrt(2) / (c^{3/2} * |j_{l+1}(u_{ls})|) * j_l(u_{ls} * k / c)

  where u_{ls} is the s-th positive zero of j_l. For fixed l they are
  orthonormal on [0, c] under the weight k^2 dk.

* Reality of the real-space volume forces a_{lms} to be real for even l and
  purely imaginary for odd l, so coefficient blocks are stored as real
  matrices and the true coefficient is i^(l mod 2) times the stored value.

The radial truncation keeps S(l) = max{s : u_{ls} <= 2 pi c R} terms, where R
is the real-space support radius in pixels (S(0) is clamped to at least 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, lpmv, spherical_jn

# Rows of positive zeros of the spherical Bessel functions, filled on demand.
# _ZERO_ROWS[l] is a python list of the first zeros of j_l in increasing order.
_ZERO_ROWS: dict[int, list[float]] = {}


def _refine_zero(ell: int, lo: float, hi: float) -> float:
    """Newton iteration for the zero of j_ell inside the open bracket (lo, hi).

    The bracket comes from interlacing so it contains exactly one simple zero.
    Newton steps are safeguarded by bisection whenever they leave the bracket.
    """
    flo = spherical_jn(ell, lo)
    x = 0.5 * (lo + hi)
    for _ in range(100):
        f = spherical_jn(ell, x)
        if f == 0.0:
            return x
        if (f > 0) == (flo > 0):
            lo = x
        else:
            hi = x
        df = spherical_jn(ell, x, derivative=True)
        x_new = x - f / df if df != 0.0 else 0.5 * (lo + hi)
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if x_new == x:
            break
        x = x_new
    return x


def _zeros_row(ell: int, count: int) -> list[float]:
    """First ``count`` positive zeros of j_ell, cached and grown as needed."""
    if ell == 0:
        row = _ZERO_ROWS.setdefault(0, [])
        while len(row) < count:
            row.append((len(row) + 1) * math.pi)
        return row
    # Row ell needs row ell-1 one zero longer (interlacing bracket).
    for layer in range(1, ell + 1):
        need = count + (ell - layer)
        row = _ZERO_ROWS.setdefault(layer, [])
        below = _zeros_row(layer - 1, need + 1) if layer > 1 else _zeros_row(0, need + 1)
        while len(row) < need:
            s = len(row)  # next zero index (0-based)
            row.append(_refine_zero(layer, below[s], below[s + 1]))
    return _ZERO_ROWS[ell][:count]


def spherical_bessel_zero(ell: int, s: int) -> float:
    """s-th positive zero u_{ell,s} of the spherical Bessel function j_ell.

    Zeros are bracketed by the interlacing property u_{l-1,s} < u_{l,s} <
    u_{l-1,s+1} and refined by safeguarded Newton iteration; j_0 zeros are
    the exact multiples of pi.
    """
    if ell < 0 or s < 1:
        raise ValueError("need ell >= 0 and s >= 1")
    return _zeros_row(ell, s)[s - 1]


def bessel_zeros(ell: int, count: int) -> np.ndarray:
    """First ``count`` positive zeros of j_ell as an array."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return np.empty(0)
    return np.asarray(_zeros_row(ell, count), dtype=float)


def radial_basis(ell: int, s: int, k, c: float) -> np.ndarray:
    """Normalized radial function f_{ell,s}(k) on 0 <= k <= c.

    f_{ls}(k) = sqrt(2) / (c^(3/2) |j_{l+1}(u_{ls})|) * j_l(u_{ls} k / c),
    orthonormal under the weight k^2 dk on [0, c].
    """
    if c <= 0:
        raise ValueError("bandlimit c must be positive")
    k = np.asarray(k, dtype=float)
    if np.any(k < 0) or np.any(k > c * (1 + 1e-12)):
        raise ValueError("radial argument outside [0, c]")
    u = spherical_bessel_zero(ell, s)
    norm = math.sqrt(2.0) / (c ** 1.5 * abs(spherical_jn(ell + 1, u)))
    return norm * spherical_jn(ell, u * np.minimum(k, c) / c)


def radial_matrix(ell: int, s_count: int, k, c: float) -> np.ndarray:
    """Matrix of radial functions, shape (len(k), s_count), column s-1 = f_{ell,s}(k)."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    out = np.empty((k.size, s_count))
    for s in range(1, s_count + 1):
        out[:, s - 1] = radial_basis(ell, s, k, c)
    return out


def truncation_limits(c: float, support_radius: float, max_degree: int) -> np.ndarray:
    """Radial truncation S(l) = #{s : u_{l,s} <= 2 pi c R} for l = 0..max_degree.

    S(0) is clamped to at least 1 so degenerate inputs still carry the
    isotropic term. Degrees whose count is 0 stay 0 and should make the
    caller lower max_degree (BasisSpec.create raises for them).
    """
    if c <= 0 or support_radius <= 0:
        raise ValueError("bandlimit and support radius must be positive")
    if max_degree < 0:
        raise ValueError("max_degree must be >= 0")
    limit = 2.0 * math.pi * c * support_radius
    counts = np.zeros(max_degree + 1, dtype=int)
    for ell in range(max_degree + 1):
        n = 0
        while spherical_bessel_zero(ell, n + 1) <= limit:
            n += 1
        counts[ell] = n
        if ell > 0 and n == 0:
            # Zeros only grow with l, every higher degree is empty too.
            break
    counts[0] = max(counts[0], 1)
    return counts


@dataclass(frozen=True)
class BasisSpec:
    """Truncated basis chart: bandlimit c, maximum degree L, support radius R,
    and per-degree radial counts S(l)."""

    bandlimit: float
    max_degree: int
    support_radius: float
    s_counts: tuple[int, ...]

    def __post_init__(self):
        if self.bandlimit <= 0 or self.bandlimit > 0.5:
            raise ValueError("bandlimit must lie in (0, 0.5] cycles per pixel")
        if self.max_degree < 0:
            raise ValueError("max_degree must be >= 0")
        if self.support_radius <= 0:
            raise ValueError("support_radius must be positive")
        if len(self.s_counts) != self.max_degree + 1:
            raise ValueError("need one radial count per degree 0..L")
        if any(s < 1 for s in self.s_counts):
            raise ValueError("every retained degree needs S(l) >= 1")
        if any(self.s_counts[i] < self.s_counts[i + 1] for i in range(len(self.s_counts) - 1)):
            raise ValueError("radial counts must be non-increasing in l")

    @classmethod
    def create(cls, bandlimit: float, max_degree: int, support_radius: float) -> "BasisSpec":
        """Build a spec from the truncation rule, rejecting empty degrees."""
        counts = truncation_limits(bandlimit, support_radius, max_degree)
        empty = [int(l) for l in range(max_degree + 1) if counts[l] < 1]
        if empty:
            raise ValueError(
                "degrees %s have no radial term under the truncation rule; "
                "lower max_degree to %d or raise the support radius"
                % (empty, empty[0] - 1)
            )
        return cls(float(bandlimit), int(max_degree), float(support_radius),
                   tuple(int(s) for s in counts))

    def block_shape(self, ell: int) -> tuple[int, int]:
        return (self.s_counts[ell], 2 * ell + 1)

    def coefficient_count(self) -> int:
        return sum(s * (2 * l + 1) for l, s in enumerate(self.s_counts))


def _legendre_block(ell: int, m: int, x: np.ndarray) -> np.ndarray:
    """Unsigned associated Legendre P_{ell,m}(x) (Condon-Shortley stripped)."""
    p = lpmv(m, ell, x)
    if m % 2 == 1:
        p = -p
    return p


def _sh_norm(ell: int, m: int) -> float:
    return math.sqrt(
        (2 * ell + 1) / (4.0 * math.pi)
        * math.exp(gammaln(ell - m + 1) - gammaln(ell + m + 1))
    )


def real_sph_harm(ell: int, m: int, theta, phi) -> np.ndarray:
    """Real spherical harmonic Y_{ell,m}(theta, phi); see the module docstring
    for the exact normalization and azimuth convention."""
    if abs(m) > ell:
        raise ValueError("|m| must not exceed ell")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    am = abs(m)
    block = _sh_norm(ell, am) * _legendre_block(ell, am, np.cos(theta))
    if m == 0:
        return block * np.ones_like(phi)
    if m > 0:
        return math.sqrt(2.0) * block * np.cos(m * phi)
    return math.sqrt(2.0) * block * np.sin(am * phi)


def harmonic_matrix(ell: int, theta, phi) -> np.ndarray:
    """All orders at once: rows m = -ell..ell, columns the evaluation points."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    x = np.cos(theta)
    out = np.empty((2 * ell + 1, theta.size))
    sq2 = math.sqrt(2.0)
    for m in range(ell + 1):
        block = _sh_norm(ell, m) * _legendre_block(ell, m, x)
        if m == 0:
            out[ell, :] = block
        else:
            out[ell + m, :] = sq2 * block * np.cos(m * phi)
            out[ell - m, :] = sq2 * block * np.sin(m * phi)
    return out


def equatorial_orders(ell: int) -> np.ndarray:
    """Orders m with ell+m even; the only rows alive on the equator.

    These are "every other" index including the first (m = -ell) and the
    last (m = +ell), ell+1 of them.
    """
    return np.arange(-ell, ell + 1, 2)


def equatorial_harmonic_matrix(ell: int, phi) -> np.ndarray:
    """Harmonic matrix at theta = pi/2 with the parity zeros exact.

    Y_{lm}(pi/2, phi) vanishes identically when l+m is odd; those rows are
    written as exact zeros rather than evaluated in floating point.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    out = np.zeros((2 * ell + 1, phi.size))
    sq2 = math.sqrt(2.0)
    for m in range(0, ell + 1):
        if (ell + m) % 2 == 1:
            continue
        block = _sh_norm(ell, m) * _legendre_block(ell, m, np.array(0.0))
        if m == 0:
            out[ell, :] = block
        else:
            out[ell + m, :] = sq2 * block * np.cos(m * phi)
            out[ell - m, :] = sq2 * block * np.sin(m * phi)
    return out
