"""Gradient descent over products of (sub-)orthogonal matrix manifolds.

Points are lists of matrices X_i with orthonormal columns (square members sit
on the orthogonal group; the rotation block of the joint refinement rides
along as a 3x3 member). The three primitives:

* tangent_project: G - X sym(X^T G), the Riemannian projection,
* retract: QR decomposition of X + step * T with the R diagonal sign-fixed,
* minimize: descent with backtracking Armijo line search, monotone cost.

The caller supplies ``cost_and_grad(point) -> (cost, [euclidean grads])``.
Everything is deterministic; no randomness lives in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizeOptions:
    max_iter: int = 500
    grad_tol: float = 1e-8        # relative to the initial gradient norm
    grad_tol_abs: float = 1e-14   # floor so a start at a critical point stops
    armijo_factor: float = 0.5
    armijo_decrease: float = 1e-4
    initial_step: float = 1.0
    max_backtracks: int = 60
    step_growth: float = 2.0


@dataclass
class OptimizeReport:
    final_cost: float
    gradient_norm: float
    iterations: int
    converged: bool
    reason: str
    cost_history: list = field(default_factory=list)


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def tangent_project(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Project an ambient gradient onto the tangent space at x (x^T x = I)."""
    return grad - x @ sym(x.T @ grad)


def qr_unique(mat: np.ndarray) -> np.ndarray:
    """Q factor with the R diagonal forced positive (unique, deterministic)."""
    q, r = np.linalg.qr(mat)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d[None, :]


def retract(x: np.ndarray, direction: np.ndarray, step: float) -> np.ndarray:
    """QR retraction of x + step * direction back onto the manifold."""
    return qr_unique(x + step * direction)


def random_orthonormal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random point on the Stiefel manifold of rows x cols matrices."""
    return qr_unique(rng.standard_normal((rows, cols)))


def _project_all(point, grads):
    return [tangent_project(x, g) for x, g in zip(point, grads)]


def _norm2(tangents) -> float:
    return float(sum(np.sum(t * t) for t in tangents))


def minimize(cost_and_grad, point, options: OptimizeOptions | None = None):
    """Descend ``cost_and_grad`` from ``point`` (list of matrices).

    Returns (final_point, OptimizeReport). The recorded cost history is
    non-increasing by construction (only Armijo-accepted steps are taken).
    """
    opts = options or OptimizeOptions()
    point = [np.array(x, dtype=float, copy=True) for x in point]
    cost, grads = cost_and_grad(point)
    tangents = _project_all(point, grads)
    sq_norm = _norm2(tangents)
    initial_norm = np.sqrt(sq_norm)
    tol = max(opts.grad_tol * initial_norm, opts.grad_tol_abs)
    history = [cost]
    step = opts.initial_step
    reason = "max_iter"
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        if np.sqrt(sq_norm) <= tol:
            reason = "grad_tol"
            iterations -= 1
            break
        accepted = False
        for _ in range(opts.max_backtracks):
            trial = [retract(x, -t, step) for x, t in zip(point, tangents)]
            trial_cost, trial_grads = cost_and_grad(trial)
            if trial_cost <= cost - opts.armijo_decrease * step * sq_norm:
                accepted = True
                break
            step *= opts.armijo_factor
        if not accepted:
            reason = "stalled"
            break
        point, cost, grads = trial, trial_cost, trial_grads
        tangents = _project_all(point, grads)
        sq_norm = _norm2(tangents)
        history.append(cost)
        step *= opts.step_growth
    else:
        iterations = opts.max_iter
    grad_norm = float(np.sqrt(sq_norm))
    converged = reason == "grad_tol"
    return point, OptimizeReport(
        final_cost=float(cost),
        gradient_norm=grad_norm,
        iterations=iterations,
        converged=converged,
        reason=reason,
        cost_history=history,
    )
