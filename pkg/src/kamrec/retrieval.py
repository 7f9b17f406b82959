"""Recovery of the per-degree orthogonal factors from two clean images.

The autocorrelation spectrum pins each coefficient block down to A_l = F_l O_l
with O_l an unknown orthogonal matrix. Two projection images at unknown
orientations supply enough constraints to recover every O_l up to a global
rotation and a hand flip. The pipeline:

1. factorize the spectrum and fix the degree-0 sign against a radial profile;
2. match each image independently: fit, per degree, the l+1 frame columns
   that survive on the equator (multi-start descent on a product of Stiefel
   manifolds);
3. grid-search the relative orientation of image 2 that makes the two matched
   frame sets consistent with a single set of orthogonal matrices, scoring
   candidates by an orthogonal Procrustes bound and then by exact image
   residuals;
4. polish the top candidates jointly over all O(2l+1) blocks and the SO(3)
   relative orientation with analytic gradients.

Everything is reported in the gauge of the first image: its orientation is
the identity, and ``rotation`` is the second image's orientation.
"""

from __future__ import annotations

import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import so3 as _so3
from .autocorr import AutocorrSpectrum, FactorSet, factorize_spectrum
from .optimizer import (OptimizeOptions, OptimizeReport, minimize,
                        random_orthonormal)
from .projector import (FourierSliceImage, SliceDesign, isotropic_operator,
                        slice_design)
from .validation import NumericalError
from .volume import VolumeCoefficients


@contextmanager
def _stage(name: str):
    """Tag numerical failures with the pipeline stage that raised them."""
    try:
        yield
    except NumericalError as exc:
        exc.stage = getattr(exc, "stage", name)
        raise


def resolve_threads(explicit: int | None = None) -> int:
    """Worker count: explicit argument, then KAM_THREADS, then cpu count."""
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get("KAM_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValueError(f"KAM_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def recover_isotropic_component(factors: FactorSet, radii, profile):
    """Resolve the degree-0 sign ambiguity against a measured radial profile.

    The degree-0 factor is determined up to O(1) = {+1, -1}; the sign
    minimizing ||sign * predicted profile - profile|| wins. When even the
    better sign fits poorly (relative residual above 0.5) a warning is
    issued and +1 is used. Returns (signed degree-0 column, sign, info).
    """
    predicted = isotropic_operator(factors.spec, radii) @ factors.blocks[0][:, 0]
    profile = np.asarray(profile, dtype=float)
    if profile.shape != predicted.shape:
        raise ValueError("profile length does not match the radii")
    sign = -1 if float(predicted @ profile) < 0 else 1
    rel = (np.linalg.norm(sign * predicted - profile)
           / max(np.linalg.norm(profile), 1e-300))
    if rel > 0.5:
        warnings.warn("isotropic profile fits poorly (relative residual "
                      f"{rel:.2f}); falling back to sign +1")
        sign = 1
    info = {"sign": sign, "relative_residual": float(rel)}
    return float(sign) * factors.blocks[0][:, 0], sign, info


def _matching_shapes(max_degree: int):
    return [(2 * ell + 1, ell + 1) for ell in range(1, max_degree + 1)]


def _matching_cost(design: SliceDesign, target: np.ndarray, iso_column):
    base = design.baseline(iso_column)[:, None]
    weights = design.weights[:, None]

    def cost_and_grad(halves):
        values = np.broadcast_to(base, target.shape).astype(complex)
        for idx, half in enumerate(halves):
            term = design.ring_ops[idx] @ half @ design.equator_active[idx]
            values = values + (1j if (idx + 1) % 2 else 1.0) * term
        err = values - target
        cost = float(np.sum(weights * (err.real ** 2 + err.imag ** 2)))
        grads = []
        for idx in range(len(halves)):
            part = err.imag if (idx + 1) % 2 else err.real
            grads.append(2.0 * design.ring_ops[idx].T @ (weights * part)
                         @ design.equator_active[idx].T)
        return cost, grads

    return cost_and_grad


@dataclass
class MatchResult:
    """Best multi-start fit of one image's equatorial frame columns."""

    halves: list              # degree 1..L: (2l+1, l+1), orthonormal columns
    cost: float
    relative_residual: float  # sqrt(cost) / weighted image norm
    start_costs: tuple        # final cost of every start, in start order
    report: OptimizeReport


def match_single_image(image: FourierSliceImage, design: SliceDesign, iso_column,
                       *, n_starts: int = 8, max_starts: int = 64,
                       residual_target: float = 1e-6, seed=0,
                       options: OptimizeOptions | None = None,
                       n_threads: int | None = None) -> MatchResult:
    """Fit per-degree frame columns to one image by multi-start descent.

    Starts are drawn in a deterministic order from ``seed``. Batches of
    ``n_starts`` run until the weighted relative residual of the best start
    drops below ``residual_target`` or ``max_starts`` starts are spent. The
    winner is the lowest (cost, start index) pair, so the thread schedule
    cannot change the result.
    """
    if options is None:
        options = OptimizeOptions()
    shapes = _matching_shapes(design.spec.max_degree)
    target = image.values
    tnorm = max(image.weighted_norm(), 1e-300)
    cost_fn = _matching_cost(design, target, iso_column)
    if not shapes:
        cost, _ = cost_fn([])
        report = OptimizeReport(cost, 0.0, 0, True, "no_variables", [cost])
        return MatchResult([], cost, math.sqrt(max(cost, 0.0)) / tnorm, (cost,), report)

    rng = (seed if isinstance(seed, np.random.Generator)
           else np.random.default_rng(seed))
    workers = resolve_threads(n_threads)
    results = []
    spent = 0
    while spent < max_starts:
        batch = min(n_starts, max_starts - spent)
        starts = [[random_orthonormal(r, c, rng) for r, c in shapes]
                  for _ in range(batch)]
        if workers > 1 and batch > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results.extend(pool.map(lambda s: minimize(cost_fn, s, options), starts))
        else:
            results.extend(minimize(cost_fn, s, options) for s in starts)
        spent += batch
        best = min(r.final_cost for _, r in results)
        if math.sqrt(max(best, 0.0)) / tnorm <= residual_target:
            break
    if all(r.reason == "stalled" and r.iterations == 0 for _, r in results):
        raise NumericalError("matching failed: every start stalled before "
                             "taking a step")
    best_idx = min(range(len(results)),
                   key=lambda i: (results[i][1].final_cost, i))
    point, report = results[best_idx]
    rel = math.sqrt(max(report.final_cost, 0.0)) / tnorm
    return MatchResult(point, report.final_cost, rel,
                       tuple(r.final_cost for _, r in results), report)


def _observable_masks(design: SliceDesign, tol: float = 1e-9):
    """Per degree, which frame rows the image data can see at all.

    Row r of a matched frame multiplies column r of the ring operator
    J_l F_l; when the factor column is (numerically) zero, that row is pure
    gauge. Masks let the merge ignore those rows instead of treating the
    random content left there by the optimizer as signal.
    """
    masks = []
    for op in design.ring_ops:
        norms = np.linalg.norm(op, axis=0)
        top = norms.max() if norms.size else 0.0
        masks.append(norms > tol * max(top, 1e-300))
    return masks


@dataclass
class MergeCandidate:
    rotation: _so3.Rotation
    score: float           # Procrustes residual sum at this rotation
    orthogonals: list      # per degree 1..L: (2l+1, 2l+1) orthogonal
    image_cost: float = math.nan  # filled by the pipeline's exact rescoring


def procrustes(d: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Orthogonal O minimizing ||O d - b||_F, from the SVD of b dᵀ.

    Globally optimal: with b dᵀ = U S Vᵀ, the maximizer of tr(Oᵀ b dᵀ) over
    the orthogonal group is U Vᵀ.
    """
    u, _, vt = np.linalg.svd(np.asarray(b) @ np.asarray(d).T)
    return u @ vt


def _equator_cols(ell: int) -> np.ndarray:
    return np.arange(0, 2 * ell + 1, 2)


def _merge_design(ell: int, dmat: np.ndarray) -> np.ndarray:
    """The (2l+1, 2l+2) frame [identity columns | rotated columns]."""
    width = 2 * ell + 1
    cols = _equator_cols(ell)
    design = np.zeros((width, 2 * (ell + 1)))
    design[cols, np.arange(ell + 1)] = 1.0
    design[:, ell + 1:] = dmat.T[:, cols]
    return design


def merge_by_grid_search(half1, half2, *, grid_resolution: float = 0.15,
                         masks=None, top_k: int = 1,
                         min_separation: float | None = None):
    """Relative orientations reconciling two sets of matched frame columns.

    For each grid rotation R and degree l, the unknown orthogonal O_l must
    map the frame D_l = [identity equatorial columns | those columns of
    D_l(R) transposed] onto B_l = [o_l half 1 | o_l half 2]; the optimal
    orthogonal fit has closed-form residual ||D||^2 + ||B||^2 -
    2 ||B Dᵀ||_nuclear. Rotations are ranked by that residual summed over
    degrees, deduplicated by ``min_separation`` (default twice the grid
    resolution), and the ``top_k`` survivors are rescored exactly with the
    unconstrained rows treated as free variables (see below). Returns
    MergeCandidate entries sorted by the exact score, each carrying the
    fitted orthogonal blocks at its rotation.

    ``masks`` (one boolean row mask per degree) marks frame rows the data
    never constrained; matched halves carry arbitrary optimizer content in
    those rows. The grid scan zeroes them, and the per-candidate fit treats
    them as free, alternating between the orthogonal fit and refilling the
    free rows from it.
    """
    if not half1 or len(half1) != len(half2):
        raise ValueError("half-assignments must cover the same degrees")
    max_degree = len(half1)
    rotations, quats, dmats = _so3.grid_with_wigner(max_degree, grid_resolution)
    n = len(rotations)
    if min_separation is None:
        min_separation = 2.0 * grid_resolution

    score = np.zeros(n)
    pinned = []
    for idx in range(max_degree):
        ell = idx + 1
        width = 2 * ell + 1
        cols = _equator_cols(ell)
        b1 = np.asarray(half1[idx], dtype=float)
        b2 = np.asarray(half2[idx], dtype=float)
        if b1.shape != (width, ell + 1) or b2.shape != (width, ell + 1):
            raise ValueError(f"degree {ell} halves must be {width}x{ell + 1}")
        if masks is not None:
            b1 = np.where(masks[idx][:, None], b1, 0.0)
            b2 = np.where(masks[idx][:, None], b2, 0.0)
        pinned.append((b1, b2))
        m_base = np.zeros((width, width))
        m_base[:, cols] = b1
        batch = m_base[None] + np.einsum("cb,nbd->ncd", b2, dmats[ell][:, cols, :])
        nuclear = np.linalg.svd(batch, compute_uv=False).sum(axis=1)
        const = 2.0 * (ell + 1) + float(np.sum(b1 * b1) + np.sum(b2 * b2))
        score += const - 2.0 * nuclear

    scan = np.argsort(score, kind="stable")[:max(4096, 8 * top_k)]
    chosen = []
    kept = np.empty((min(top_k, scan.size), 4))
    for idx in scan:
        if chosen:
            dots = np.abs(kept[:len(chosen)] @ quats[idx])
            if np.any(2.0 * np.arccos(np.minimum(dots, 1.0)) < min_separation):
                continue
        kept[len(chosen)] = quats[idx]
        chosen.append(int(idx))
        if len(chosen) >= top_k:
            break

    candidates = []
    for idx in chosen:
        orths = []
        refined_score = 0.0
        for jdx in range(max_degree):
            ell = jdx + 1
            b1, b2 = pinned[jdx]
            d = _merge_design(ell, dmats[ell][idx])
            b = np.hstack([b1, b2])
            o = procrustes(d, b)
            if masks is not None and not masks[jdx].all():
                # Rows the data never constrained are free variables, not
                # zeros; alternating between the Procrustes fit and filling
                # those rows from the current fit removes the bias that
                # forced zeros would exert on the orthogonal estimate.
                free = ~masks[jdx]
                for _ in range(8):
                    b[free] = (o @ d)[free]
                    o = procrustes(d, b)
            refined_score += float(np.sum((o @ d - b) ** 2))
            orths.append(o)
        candidates.append(MergeCandidate(rotations[idx], refined_score, orths))
    candidates.sort(key=lambda c: c.score)
    return candidates


def _image_pair_cost(design: SliceDesign, iso_column, orthogonals, dmats_rel,
                     target1, target2) -> float:
    v1 = design.predict_full(orthogonals, iso_column)
    v2 = design.predict_full(orthogonals, iso_column, dmats=dmats_rel)
    w = design.weights[:, None]
    return float(np.sum(w * np.abs(v1 - target1) ** 2)
                 + np.sum(w * np.abs(v2 - target2) ** 2))


def _pair_cost_fixed(design: SliceDesign, iso_column, target1, target2,
                     rotated_eq):
    """Two-image cost over full orthogonal blocks at a frozen orientation.

    ``rotated_eq`` holds the second image's equatorial operators with the
    Wigner blocks already applied, so each evaluation is a handful of matrix
    products. Gradients are exact (the model is linear in every block).
    """
    base = design.baseline(iso_column)[:, None]
    weights = design.weights[:, None]

    def cost_and_grad(orth):
        v1 = np.broadcast_to(base, target1.shape).astype(complex)
        v2 = v1.copy()
        for idx, o in enumerate(orth):
            phase = 1j if (idx + 1) % 2 else 1.0
            to = design.ring_ops[idx] @ o
            v1 = v1 + phase * (to @ design.equator_full[idx])
            v2 = v2 + phase * (to @ rotated_eq[idx])
        e1 = v1 - target1
        e2 = v2 - target2
        cost = float(np.sum(weights * (e1.real ** 2 + e1.imag ** 2))
                     + np.sum(weights * (e2.real ** 2 + e2.imag ** 2)))
        grads = []
        for idx in range(len(orth)):
            p1 = e1.imag if (idx + 1) % 2 else e1.real
            p2 = e2.imag if (idx + 1) % 2 else e2.real
            grads.append(2.0 * design.ring_ops[idx].T
                         @ ((weights * p1) @ design.equator_full[idx].T
                            + (weights * p2) @ rotated_eq[idx].T))
        return cost, grads

    return cost_and_grad


def _linear_pair_fit(design: SliceDesign, iso_column, target1, target2,
                     rotated_eq):
    """Deterministic block initialization from a relaxed two-image fit.

    Only the rows of O_l multiplying nonzero factor columns ever touch the
    data; dropping the orthogonality constraint on those rows makes both
    image predictions linear in them, and the system decouples by parity
    (even degrees build the real part, odd the imaginary). Two images at a
    known relative orientation make the stacked system uniquely solvable,
    which sidesteps the local minima that trap descent from random blocks.
    The solved rows are projected to the nearest row-orthonormal set and
    completed with their orthogonal complement; returns the blocks plus the
    relaxed residual, a lower bound on any orthogonal fit at this
    orientation. The relaxed system is itself rank-deficient (the same
    radial-span overlap that lets single-image content drift), so the
    residual cannot rank orientations on its own, but the projected solution
    reliably starts descent inside the right basin once the orientation is
    close.
    """
    spec = design.spec
    max_degree = spec.max_degree
    masks = _observable_masks(design)
    base = design.baseline(iso_column)[:, None]
    sqw = np.sqrt(design.weights)[:, None]
    res1 = (target1 - base)
    res2 = (target2 - base)
    if max_degree == 0:
        flat = float(np.sum(design.weights[:, None]
                            * (np.abs(res1) ** 2 + np.abs(res2) ** 2)))
        return [], flat
    residual = 0.0
    solved = {}
    for parity in (0, 1):
        degrees = [ell for ell in range(1, max_degree + 1) if ell % 2 == parity]
        if not degrees:
            part1 = res1.imag if parity else res1.real
            part2 = res2.imag if parity else res2.real
            residual += float(np.sum(design.weights[:, None]
                                     * (part1 ** 2 + part2 ** 2)))
            continue
        cols = []
        blocks = []
        for ell in degrees:
            obs = np.where(masks[ell - 1])[0]
            top = design.ring_ops[ell - 1][:, obs]
            width = 2 * ell + 1
            a1 = np.einsum("ra,bp->rpab", sqw * top,
                           design.equator_full[ell - 1])
            a2 = np.einsum("ra,bp->rpab", sqw * top, rotated_eq[ell - 1])
            n = top.shape[0] * design.grid.n_phi
            cols.append((ell, obs, width))
            blocks.append(np.concatenate([a1.reshape(n, -1),
                                          a2.reshape(n, -1)]))
        a = np.hstack(blocks)
        part1 = res1.imag if parity else res1.real
        part2 = res2.imag if parity else res2.real
        b = np.concatenate([(sqw * part1).ravel(), (sqw * part2).ravel()])
        x, _, _, _ = np.linalg.lstsq(a, b, rcond=None)
        residual += float(np.sum((a @ x - b) ** 2))
        offset = 0
        for ell, obs, width in cols:
            size = obs.size * width
            solved[ell] = (obs, x[offset:offset + size].reshape(obs.size, width))
            offset += size
    orthogonals = []
    for ell in range(1, max_degree + 1):
        obs, rows = solved[ell]
        width = 2 * ell + 1
        u, _, vt = np.linalg.svd(rows, full_matrices=True)
        v = u @ vt[:obs.size]
        block = np.zeros((width, width))
        block[obs] = v
        free = np.setdiff1d(np.arange(width), obs)
        if free.size:
            block[free] = vt[obs.size:]
        orthogonals.append(block)
    return orthogonals, residual


def _orientation_cost(design: SliceDesign, iso_column, target1, target2,
                      inner_options: OptimizeOptions, state: dict):
    """Reduced two-image cost over the relative orientation alone.

    Each evaluation refits all orthogonal blocks at the proposed orientation
    (warm-started from the previous fit, kept in ``state``) and returns the
    fitted cost. The gradient is the orientation partial derivative at the
    refitted blocks; at an exact inner optimum that is the exact gradient of
    the reduced cost, because the inner stationarity kills the indirect
    term. This lets descent move the orientation across distances that stall
    the fully joint problem, where the blocks and the orientation are
    consistent with each other at every wrong orientation.
    """
    spec = design.spec
    max_degree = spec.max_degree
    base = design.baseline(iso_column)[:, None]
    weights = design.weights[:, None]
    generators = [_so3.wigner_generators(ell) for ell in range(1, max_degree + 1)]

    def cost_and_grad(point):
        rot = point[0]
        dmats = _so3.real_wigner_d_all(max_degree, rot[None])
        rotated_eq = [dmats[ell][0].T @ design.equator_full[ell - 1]
                      for ell in range(1, max_degree + 1)]
        inner = _pair_cost_fixed(design, iso_column, target1, target2, rotated_eq)
        orth, report = minimize(inner, state["orth"], inner_options)
        state["orth"] = orth
        v2 = np.broadcast_to(base, target2.shape).astype(complex)
        for idx, o in enumerate(orth):
            phase = 1j if (idx + 1) % 2 else 1.0
            v2 = v2 + phase * (design.ring_ops[idx] @ o @ rotated_eq[idx])
        e2 = v2 - target2
        gen_coeffs = np.zeros(3)
        for idx, o in enumerate(orth):
            p2 = e2.imag if (idx + 1) % 2 else e2.real
            kernel = rotated_eq[idx] @ (weights * p2).T @ design.ring_ops[idx] @ o
            gen_coeffs += 2.0 * np.einsum("jab,ab->j", generators[idx], kernel)
        grad = rot @ (0.5 * np.einsum("j,jab->ab", gen_coeffs, _so3.SO3_GENERATORS))
        return report.final_cost, [grad]

    return cost_and_grad


@dataclass
class PairMatchResult:
    """Best multi-start two-image fit of the orthogonal blocks."""

    orthogonals: list         # degree 1..L: (2l+1, 2l+1) orthogonal
    cost: float
    start_costs: tuple
    report: OptimizeReport


def match_image_pair(image1: FourierSliceImage, image2: FourierSliceImage,
                     design: SliceDesign, iso_column, rotation: _so3.Rotation,
                     *, inits=None, n_starts: int = 4, seed=0,
                     options: OptimizeOptions | None = None,
                     n_threads: int | None = None) -> PairMatchResult:
    """Fit full orthogonal blocks to two images at a known relative orientation.

    A single image leaves same-parity degrees nearly interchangeable: their
    radial families span almost the same sampled subspace, so content can
    drift between degrees with little residual change. The second image
    breaks that degeneracy because the drift direction does not survive the
    orientation change. Holding the orientation fixed keeps each evaluation
    cheap; ``inits`` seeds the first starts (merge candidates), the rest are
    random. The winner is the lowest (cost, start index) pair.
    """
    if options is None:
        options = OptimizeOptions()
    max_degree = design.spec.max_degree
    dmats = _so3.real_wigner_d_all(max_degree, rotation.matrix[None])
    rotated_eq = [dmats[ell][0].T @ design.equator_full[ell - 1]
                  for ell in range(1, max_degree + 1)]
    cost_fn = _pair_cost_fixed(design, iso_column, image1.values, image2.values,
                               rotated_eq)
    if max_degree == 0:
        cost, _ = cost_fn([])
        report = OptimizeReport(cost, 0.0, 0, True, "no_variables", [cost])
        return PairMatchResult([], cost, (cost,), report)

    rng = (seed if isinstance(seed, np.random.Generator)
           else np.random.default_rng(seed))
    starts = [[np.asarray(o, dtype=float) for o in init] for init in (inits or [])]
    while len(starts) < max(n_starts, len(starts)):
        starts.append([random_orthonormal(2 * ell + 1, 2 * ell + 1, rng)
                       for ell in range(1, max_degree + 1)])
    workers = resolve_threads(n_threads)
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: minimize(cost_fn, s, options), starts))
    else:
        results = [minimize(cost_fn, s, options) for s in starts]
    best_idx = min(range(len(results)),
                   key=lambda i: (results[i][1].final_cost, i))
    point, report = results[best_idx]
    return PairMatchResult(point, report.final_cost,
                           tuple(r.final_cost for _, r in results), report)


def _joint_cost(design: SliceDesign, iso_column, target1, target2):
    spec = design.spec
    max_degree = spec.max_degree
    base = design.baseline(iso_column)[:, None]
    weights = design.weights[:, None]
    generators = [_so3.wigner_generators(ell) for ell in range(1, max_degree + 1)]

    def cost_and_grad(point):
        orth = point[:-1]
        rot = point[-1]
        dmats = _so3.real_wigner_d_all(max_degree, rot[None])
        v1 = np.broadcast_to(base, target1.shape).astype(complex)
        v2 = v1.copy()
        rotated_eq = []
        for idx, o in enumerate(orth):
            ell = idx + 1
            phase = 1j if ell % 2 else 1.0
            z = dmats[ell][0].T @ design.equator_full[idx]
            rotated_eq.append(z)
            v1 = v1 + phase * (design.ring_ops[idx] @ o @ design.equator_full[idx])
            v2 = v2 + phase * (design.ring_ops[idx] @ o @ z)
        e1 = v1 - target1
        e2 = v2 - target2
        cost = float(np.sum(weights * (e1.real ** 2 + e1.imag ** 2))
                     + np.sum(weights * (e2.real ** 2 + e2.imag ** 2)))
        gen_coeffs = np.zeros(3)
        grads = []
        for idx, o in enumerate(orth):
            ell = idx + 1
            p1 = e1.imag if ell % 2 else e1.real
            p2 = e2.imag if ell % 2 else e2.real
            w1 = weights * p1
            w2 = weights * p2
            grads.append(2.0 * design.ring_ops[idx].T
                         @ (w1 @ design.equator_full[idx].T
                            + w2 @ rotated_eq[idx].T))
            kernel = rotated_eq[idx] @ w2.T @ design.ring_ops[idx] @ o
            gen_coeffs += 2.0 * np.einsum("jab,ab->j", generators[idx], kernel)
        grads.append(rot @ (0.5 * np.einsum("j,jab->ab",
                                            gen_coeffs, _so3.SO3_GENERATORS)))
        return cost, grads

    return cost_and_grad


@dataclass
class RefineResult:
    orthogonals: list
    rotation: _so3.Rotation
    cost: float
    report: OptimizeReport


def refine_joint(design: SliceDesign, iso_column,
                 image1: FourierSliceImage, image2: FourierSliceImage,
                 orthogonals, rotation: _so3.Rotation,
                 *, options: OptimizeOptions | None = None) -> RefineResult:
    """Polish all orthogonal blocks and the relative orientation jointly.

    Minimizes the summed weighted squared error of both predicted images
    over the product of O(2l+1) blocks and SO(3); the rotation matrix rides
    along as the last member of the point list, and the QR retraction keeps
    it orthogonal with positive determinant (it starts in SO(3) and moves
    continuously). The rotation gradient uses the exact generator images of
    the Wigner blocks, so convergence does not rely on finite differences.
    """
    if options is None:
        options = OptimizeOptions()
    cost_fn = _joint_cost(design, iso_column, image1.values, image2.values)
    start = [np.asarray(o, dtype=float) for o in orthogonals] + [rotation.matrix]
    point, report = minimize(cost_fn, start, options)
    return RefineResult(point[:-1], _so3.Rotation.from_matrix(point[-1]),
                        report.final_cost, report)


def assemble_coefficients(factors: FactorSet, sign: int,
                          orthogonals) -> VolumeCoefficients:
    """Coefficients from factors plus recovered orthogonal blocks."""
    blocks = [float(sign) * factors.blocks[0].copy()]
    for idx in range(1, factors.spec.max_degree + 1):
        blocks.append(factors.blocks[idx] @ orthogonals[idx - 1])
    return VolumeCoefficients(factors.spec, blocks)


@dataclass
class ReconstructionResult:
    coefficients: VolumeCoefficients   # gauge: image 1 at the identity
    rotation: _so3.Rotation            # orientation of image 2 in that gauge
    sign: int
    orthogonals: list
    diagnostics: dict


def _refine_candidate(design: SliceDesign, iso_column,
                      image1: FourierSliceImage, image2: FourierSliceImage,
                      candidate: MergeCandidate, *, rounds: int,
                      pair_options: OptimizeOptions,
                      inner_options: OptimizeOptions,
                      outer_options: OptimizeOptions,
                      refine_options: OptimizeOptions | None,
                      stop_cost: float) -> RefineResult:
    """Alternate relaxed re-initialization with orientation descent.

    Each round solves the relaxed block fit at the current orientation
    estimate, fits the orthogonal blocks at that frozen orientation from
    both the relaxed solution and the best blocks so far, and then descends
    the refit-by-iteration orientation cost. Rebuilding the initialization
    after every orientation update is what makes the rounds converge: a
    single warm-started descent drags its block basin along as the
    orientation improves, while the relaxed solve at a nearly correct
    orientation starts the block fit inside the right basin. Finishes with
    a joint polish of blocks and orientation together.
    """
    max_degree = design.spec.max_degree
    rot = candidate.rotation
    state = {"orth": [np.asarray(o, dtype=float) for o in candidate.orthogonals]}
    for _ in range(rounds):
        dmats = _so3.real_wigner_d_all(max_degree, rot.matrix[None])
        rotated_eq = [dmats[ell][0].T @ design.equator_full[ell - 1]
                      for ell in range(1, max_degree + 1)]
        init, _ = _linear_pair_fit(design, iso_column, image1.values,
                                   image2.values, rotated_eq)
        pair = match_image_pair(image1, image2, design, iso_column, rot,
                                inits=[init, state["orth"]], n_starts=2,
                                options=pair_options, n_threads=1)
        state["orth"] = pair.orthogonals
        outer = _orientation_cost(design, iso_column, image1.values,
                                  image2.values, inner_options, state)
        point, report = minimize(outer, [rot.matrix], outer_options)
        rot = _so3.Rotation.from_matrix(point[0])
        if report.final_cost <= stop_cost:
            break
    return refine_joint(design, iso_column, image1, image2, state["orth"], rot,
                        options=refine_options)


def reconstruct(spectrum: AutocorrSpectrum, images, profile_radii, profile_values,
                *, grid_resolution: float = 0.15, n_starts: int = 8,
                max_starts: int = 16, shortlist: int = 64, top_candidates: int = 5,
                refine_rounds: int = 3, refine_target: float = 1e-8,
                seed=0, n_threads: int | None = None,
                match_options: OptimizeOptions | None = None,
                pair_options: OptimizeOptions | None = None,
                refine_options: OptimizeOptions | None = None) -> ReconstructionResult:
    """Full pipeline: spectrum plus two clean images to coefficients.

    ``images`` is a pair of FourierSliceImage on a common polar grid;
    ``profile_radii``/``profile_values`` give the isotropic radial profile
    used to fix the degree-0 sign. Each shortlisted orientation is refined
    by up to ``refine_rounds`` rounds of relaxed re-initialization, frozen-
    orientation block fitting, and orientation descent, then polished
    jointly; candidates are processed in rescored order and refinement
    stops once one reaches a relative residual of ``refine_target``.
    Deterministic for fixed ``seed`` regardless of thread count.
    """
    if len(images) != 2:
        raise ValueError("exactly two images are required")
    image1, image2 = images
    grid = image1.grid
    if (not np.allclose(grid.radii_array(), image2.grid.radii_array())
            or grid.n_phi != image2.grid.n_phi):
        raise ValueError("images must share one polar grid")
    timings = {}
    t0 = time.perf_counter()
    with _stage("factorize"):
        factors = factorize_spectrum(spectrum)
    design = slice_design(factors.blocks, spectrum.spec, grid)
    profile = (profile_values if profile_radii is None
               else np.interp(grid.radii_array(), profile_radii, profile_values))
    with _stage("isotropic-sign"):
        iso_column, sign, sign_info = recover_isotropic_component(
            factors, grid.radii_array(), profile)
    timings["setup"] = time.perf_counter() - t0

    seeds = np.random.SeedSequence(seed).spawn(2)
    if match_options is None:
        match_options = OptimizeOptions(max_iter=1500)
    t0 = time.perf_counter()
    with _stage("match"):
        match1 = match_single_image(image1, design, iso_column, n_starts=n_starts,
                                    max_starts=max_starts, residual_target=1e-5,
                                    seed=np.random.default_rng(seeds[0]),
                                    options=match_options, n_threads=n_threads)
        match2 = match_single_image(image2, design, iso_column, n_starts=n_starts,
                                    max_starts=max_starts, residual_target=1e-5,
                                    seed=np.random.default_rng(seeds[1]),
                                    options=match_options, n_threads=n_threads)
    timings["match"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("merge"):
        candidates = merge_by_grid_search(match1.halves, match2.halves,
                                          grid_resolution=grid_resolution,
                                          masks=_observable_masks(design),
                                          top_k=shortlist)
        for cand in candidates:
            rel = _so3.real_wigner_d_all(spectrum.spec.max_degree,
                                         cand.rotation.matrix[None])
            cand.image_cost = _image_pair_cost(design, iso_column, cand.orthogonals,
                                               [rel[ell][0] for ell in
                                                range(1, spectrum.spec.max_degree + 1)],
                                               image1.values, image2.values)
        candidates.sort(key=lambda c: c.image_cost)
        candidates = candidates[:top_candidates]
    timings["merge"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    workers = resolve_threads(n_threads)
    if pair_options is None:
        pair_options = OptimizeOptions(max_iter=1500)
    inner_options = OptimizeOptions(max_iter=300)
    outer_options = OptimizeOptions(max_iter=50)
    image_norm = image1.weighted_norm() ** 2 + image2.weighted_norm() ** 2
    stop_cost = max(image_norm, 1e-300) * refine_target ** 2

    def refine_one(candidate: MergeCandidate) -> RefineResult:
        return _refine_candidate(design, iso_column, image1, image2, candidate,
                                 rounds=refine_rounds,
                                 pair_options=pair_options,
                                 inner_options=inner_options,
                                 outer_options=outer_options,
                                 refine_options=refine_options,
                                 stop_cost=stop_cost)

    with _stage("refine"):
        # Refine in rescored order, a fixed-size chunk at a time, stopping
        # once a candidate is clearly converged; fixed chunks keep the
        # outcome independent of the worker count.
        chunk_size = 2
        refined = []
        for lo in range(0, len(candidates), chunk_size):
            chunk = candidates[lo:lo + chunk_size]
            if workers > 1 and len(chunk) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    refined.extend(pool.map(refine_one, chunk))
            else:
                refined.extend(refine_one(c) for c in chunk)
            if min(r.cost for r in refined) <= stop_cost:
                break
        best = min(refined, key=lambda r: r.cost)
    timings["refine"] = time.perf_counter() - t0

    coeffs = assemble_coefficients(factors, sign, best.orthogonals)
    diagnostics = {
        "sign": sign_info,
        "match_residuals": (match1.relative_residual, match2.relative_residual),
        "match_starts": (len(match1.start_costs), len(match2.start_costs)),
        "candidate_scores": [c.score for c in candidates],
        "candidate_image_costs": [c.image_cost for c in candidates],
        "refined_costs": [r.cost for r in refined],
        "final_cost": best.cost,
        "final_relative_residual": math.sqrt(max(best.cost, 0.0))
                                   / max(math.sqrt(image_norm), 1e-300),
        "grid_size": len(_so3.grid_with_wigner(spectrum.spec.max_degree,
                                               grid_resolution)[0]),
        "timings": timings,
    }
    return ReconstructionResult(coeffs, best.rotation, sign,
                                best.orthogonals, diagnostics)
