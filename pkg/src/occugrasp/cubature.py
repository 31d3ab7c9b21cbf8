"""Sigma-point cubature fusion of positional and predictive uncertainty.

For a query point, the locally fused positional covariance defines a Gaussian
over where the query "really" is; the predictive model is evaluated at the
sigma points of that Gaussian and combined with the cubature weights into a
single occupancy mean and occupancy variance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCovariance, InvalidSpread
from .field import DEFAULT_FUSION_NEIGHBORS, FusedOccupancyField
from .svgp import predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CubatureRule:
    """Unit sigma points and weights for a given spread parameterization."""

    alpha: float
    beta: float
    kappa: float
    dimension: int
    lam: float
    unit_points: np.ndarray   # (2d+1) x d: origin, then +/- e_i pairs
    mean_weights: np.ndarray
    var_weights: np.ndarray


def make_rule(alpha: float = 1.0, beta: float = 2.0, kappa: float = 2.0,
              d: int = 3, paper_verbatim_weights: bool = False) -> CubatureRule:
    """Construct the 2d+1 point cubature rule.

    lam = alpha^2 (d + kappa) - d. Off-center mean weights default to the
    standard 1/(2(d+lam)) form, which sums to 1; paper_verbatim_weights
    switches to lam/(2(d+lam)), which does not.
    """
    lam = alpha ** 2 * (d + kappa) - d
    if d + lam <= 0:
        raise InvalidSpread(f"d + lambda = {d + lam} must be positive")
    unit = np.zeros((2 * d + 1, d))
    for i in range(d):
        unit[1 + 2 * i, i] = 1.0
        unit[2 + 2 * i, i] = -1.0
    if paper_verbatim_weights:
        w_side = lam / (2.0 * (d + lam))
    else:
        w_side = 1.0 / (2.0 * (d + lam))
    w_mu = np.full(2 * d + 1, w_side)
    w_mu[0] = lam / (d + lam)
    w_var = w_mu.copy()
    w_var[0] = lam / (d + lam) + (1.0 - alpha ** 2 + beta)
    return CubatureRule(alpha=alpha, beta=beta, kappa=kappa, dimension=d,
                        lam=lam, unit_points=unit,
                        mean_weights=w_mu, var_weights=w_var)


def sigma_points(rule: CubatureRule, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Sigma points mean + sqrt(d+lam) * L * u_i with L L^T = cov.

    A jitter proportional to the trace is added before the Cholesky, since
    fused covariances from collinear measurements can be rank deficient.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = rule.dimension
    jitter = 1e-12 * max(np.trace(cov) / d, 1.0e-12)
    try:
        L = np.linalg.cholesky(cov + jitter * np.eye(d))
    except np.linalg.LinAlgError:
        raise DegenerateCovariance("covariance has no Cholesky factor") from None
    return mean + np.sqrt(d + rule.lam) * rule.unit_points @ L.T


@dataclass(frozen=True)
class OccupancyUncertainty:
    occupancy_mean: float
    occupancy_variance: float
    query_point: np.ndarray


def fuse(query: np.ndarray, field: FusedOccupancyField, model, rule: CubatureRule,
         k: int = DEFAULT_FUSION_NEIGHBORS) -> OccupancyUncertainty:
    """Fuse observational and predictive uncertainty at one query point.

    Steps: locally fused positional covariance from the field's k nearest
    components, sigma points of N(query, fused cov), model predictions at the
    sigma points, then weighted sums for the occupancy mean and variance.
    `model` needs only a predict(queries) interface returning objects with
    occupancy_mean and scaled_variance.
    """
    query = np.asarray(query, dtype=float)
    fusion = field.bayesian_fuse(query, k)
    pts = sigma_points(rule, query, fusion.fused_covariance)
    if hasattr(model, "predict"):
        preds = model.predict(pts)
    else:
        preds = predict(model, pts)
    mus = np.array([p.occupancy_mean for p in preds])
    vars_scaled = np.array([p.scaled_variance for p in preds])
    mu_occ = float(rule.mean_weights @ mus)
    var_occ = float(rule.var_weights @ vars_scaled)
    if var_occ < 0:
        logger.warning("negative occupancy variance %g at %s clamped to 0", var_occ, query)
        var_occ = 0.0
    return OccupancyUncertainty(occupancy_mean=mu_occ, occupancy_variance=var_occ,
                                query_point=query)


def fuse_batch(queries, field: FusedOccupancyField, model, rule: CubatureRule,
               k: int = DEFAULT_FUSION_NEIGHBORS):
    """Element-wise fuse over queries; errors are collected, not fail-fast.

    Returns a list of OccupancyUncertainty-or-Exception, order preserving.
    """
    results = []
    for q in queries:
        try:
            results.append(fuse(q, field, model, rule, k))
        except Exception as exc:  # noqa: BLE001 - per-query error collection
            logger.warning("fuse failed at %s: %s", q, exc)
            results.append(exc)
    return results
