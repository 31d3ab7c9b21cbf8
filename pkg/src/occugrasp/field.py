"""Fused occupancy field: a uniform-weight Gaussian mixture over measurement points.

The field keeps one component per world-frame measurement. Backprojected
covariances are rank-1, so a small diagonal loading is applied at build time
to make every component invertible (required by the Bayesian fusion step).
Density evaluation runs in log space to survive tiny covariances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .camera import GaussianPoint3
from .errors import DegenerateComponent, EmptyField, SingularFusion

logger = logging.getLogger(__name__)

DEFAULT_REGULARIZATION = 1e-6  # m^2 diagonal loading; rank-1 inputs need it
DEFAULT_FUSION_NEIGHBORS = 8
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FusionResult:
    """Output of responsibility computation / weighted Bayesian fusion."""

    fused_covariance: np.ndarray | None
    neighbor_indices: np.ndarray
    responsibilities: np.ndarray


class FusedOccupancyField:
    """GMM occupancy density with a k-d tree over component means.

    Immutable after construction; all queries are read-only.
    """

    def __init__(self, points: list[GaussianPoint3], regularization: float = DEFAULT_REGULARIZATION):
        if not points:
            raise EmptyField("cannot build a field from zero points")
        if regularization < 0:
            raise ValueError("regularization must be >= 0")
        self.regularization = float(regularization)
        self.means = np.array([p.mean for p in points], dtype=float)
        covs = np.array([p.covariance for p in points], dtype=float)
        covs += regularization * np.eye(3)
        self.covariances = covs
        self._cholesky = np.empty_like(covs)
        for j in range(len(points)):
            try:
                self._cholesky[j] = np.linalg.cholesky(covs[j])
            except np.linalg.LinAlgError:
                raise DegenerateComponent(j) from None
        # log-normalizer of each component: -0.5*(3 log 2pi + log|Sigma|)
        self._log_norm = -0.5 * (3.0 * _LOG_2PI) - np.log(
            np.diagonal(self._cholesky, axis1=1, axis2=2)
        ).sum(axis=1)
        self.index = cKDTree(self.means)

    def __len__(self) -> int:
        return len(self.means)

    def component_log_densities(self, p: np.ndarray, indices=None) -> np.ndarray:
        """log N(p | mu_j, Sigma_j) for the given components (all by default)."""
        p = np.asarray(p, dtype=float)
        if indices is None:
            indices = np.arange(len(self))
        indices = np.asarray(indices)
        out = np.empty(len(indices))
        for i, j in enumerate(indices):
            diff = p - self.means[j]
            z = np.linalg.solve(self._cholesky[j], diff)
            out[i] = self._log_norm[j] - 0.5 * z @ z
        return out

    def log_density(self, p: np.ndarray, truncation_radius: float | None = None) -> float:
        """Log of the mixture density (1/N) sum_j N(p | mu_j, Sigma_j).

        With a truncation radius, only components whose mean lies within that
        radius of p are summed; no components in range gives -inf.
        """
        if truncation_radius is not None:
            indices = np.asarray(self.index.query_ball_point(np.asarray(p, float), truncation_radius))
            if indices.size == 0:
                return -np.inf
        else:
            indices = None
        logs = self.component_log_densities(p, indices)
        return float(logsumexp(logs) - np.log(len(self)))

    def density(self, p: np.ndarray, truncation_radius: float | None = None) -> float:
        """Mixture density; may underflow to 0 for far queries."""
        return float(np.exp(self.log_density(p, truncation_radius)))

    def density_batch(self, points: np.ndarray) -> np.ndarray:
        """Mixture density at many query points, vectorized over queries."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        log_terms = np.empty((len(self), points.shape[0]))
        for j in range(len(self)):
            diff = points - self.means[j]
            z = np.linalg.solve(self._cholesky[j], diff.T)
            log_terms[j] = self._log_norm[j] - 0.5 * (z * z).sum(axis=0)
        return np.exp(logsumexp(log_terms, axis=0) - np.log(len(self)))

    def responsibilities(self, p: np.ndarray, k: int = DEFAULT_FUSION_NEIGHBORS) -> FusionResult:
        """Posterior weights of the k nearest components for query p.

        Priors are uniform so they cancel in the normalization.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if k > len(self):
            logger.warning("k=%d exceeds component count %d; clamping", k, len(self))
            k = len(self)
        p = np.asarray(p, dtype=float)
        _, idx = self.index.query(p, k=k)
        idx = np.atleast_1d(idx)
        logs = self.component_log_densities(p, idx)
        gamma = np.exp(logs - logsumexp(logs))
        gamma /= gamma.sum()
        return FusionResult(fused_covariance=None, neighbor_indices=idx, responsibilities=gamma)

    def bayesian_fuse(self, p: np.ndarray, k: int = DEFAULT_FUSION_NEIGHBORS) -> FusionResult:
        """Responsibility-weighted Bayesian covariance fusion at query p.

        Returns the inverse of the gamma-weighted sum of component precisions.
        """
        partial = self.responsibilities(p, k)
        precision_sum = np.zeros((3, 3))
        for gamma, j in zip(partial.responsibilities, partial.neighbor_indices):
            prec = cho_solve((self._cholesky[j], True), np.eye(3))
            precision_sum += gamma * prec
        try:
            fused = np.linalg.inv(precision_sum)
        except np.linalg.LinAlgError:
            raise SingularFusion("weighted precision sum is singular") from None
        fused = 0.5 * (fused + fused.T)
        if np.linalg.eigvalsh(fused).min() <= 0:
            raise SingularFusion("fused covariance is not positive definite")
        return FusionResult(fused_covariance=fused,
                            neighbor_indices=partial.neighbor_indices,
                            responsibilities=partial.responsibilities)


def build_field(points: list[GaussianPoint3],
                regularization: float = DEFAULT_REGULARIZATION) -> FusedOccupancyField:
    """Build the fused occupancy field from world-frame Gaussian points."""
    return FusedOccupancyField(points, regularization)


def filter_outliers(points: list[GaussianPoint3], k_neighbors: int = 20,
                    std_ratio: float = 0.01) -> list[GaussianPoint3]:
    """Statistical outlier removal on the point means.

    A point is dropped when its mean distance to its k nearest neighbors
    exceeds the global mean of those distances plus std_ratio times their
    standard deviation. Input order is preserved.
    """
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    if std_ratio <= 0:
        raise ValueError("std_ratio must be > 0")
    if len(points) < k_neighbors + 1:
        logger.warning("only %d points for k_neighbors=%d; skipping outlier removal",
                       len(points), k_neighbors)
        return list(points)
    means = np.array([p.mean for p in points])
    tree = cKDTree(means)
    # k+1 because each point is its own nearest neighbor
    dists, _ = tree.query(means, k=k_neighbors + 1)
    mean_dists = dists[:, 1:].mean(axis=1)
    threshold = mean_dists.mean() + std_ratio * mean_dists.std()
    return [p for p, d in zip(points, mean_dists) if d <= threshold]
