"""Scikit-learn style facade over the reconstruction pipeline.

KamReconstructor wraps retrieval.reconstruct behind the familiar
fit / predict / score surface so the pipeline can sit inside sklearn
tooling (grid searches over hyperparameters, cloning, parameter
introspection). Fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .metrics import align_globally
from .projector import polar_grid, project_clean_stack
from .retrieval import reconstruct


class KamReconstructor(BaseEstimator):
    """Recover volume coefficients from autocorrelation data plus two images.

    Parameters mirror retrieval.reconstruct and are stored verbatim so
    get_params/set_params/clone behave as sklearn expects.
    """

    def __init__(self, grid_resolution: float = 0.15, n_starts: int = 8,
                 max_starts: int = 64, shortlist: int = 64,
                 top_candidates: int = 5, random_state: int = 0,
                 n_threads: int | None = None):
        self.grid_resolution = grid_resolution
        self.n_starts = n_starts
        self.max_starts = max_starts
        self.shortlist = shortlist
        self.top_candidates = top_candidates
        self.random_state = random_state
        self.n_threads = n_threads

    def fit(self, spectrum, images, profile_radii=None, profile_values=None):
        """Run the full pipeline; inputs are the per-degree autocorrelation
        matrices, exactly two polar images, and an isotropic profile."""
        result = reconstruct(
            spectrum, images, profile_radii, profile_values,
            grid_resolution=self.grid_resolution,
            n_starts=self.n_starts,
            max_starts=self.max_starts,
            shortlist=self.shortlist,
            top_candidates=self.top_candidates,
            seed=self.random_state,
            n_threads=self.n_threads,
        )
        self.coefficients_ = result.coefficients
        self.rotation_ = result.rotation
        self.sign_ = result.sign
        self.orthogonals_ = result.orthogonals
        self.diagnostics_ = result.diagnostics
        return self

    def predict(self, rotations, grid=None):
        """Clean polar projections of the fitted volume at given rotations."""
        self._check_fitted()
        if grid is None:
            grid = polar_grid(self.coefficients_.spec)
        return project_clean_stack(self.coefficients_, rotations, grid)

    def score(self, reference) -> float:
        """Rotation- and reflection-invariant correlation against reference
        coefficients on the same chart; 1.0 means a perfect recovery."""
        self._check_fitted()
        return align_globally(reference, self.coefficients_,
                              grid_resolution=self.grid_resolution).correlation

    def _check_fitted(self):
        if not hasattr(self, "coefficients_"):
            raise RuntimeError("estimator is not fitted; call fit first")
