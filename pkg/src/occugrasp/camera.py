"""Backprojection of uncertain depth pixels into world-frame Gaussian points.

Each depth pixel is treated as a Gaussian random variable. Its variance is
pushed through the first-order linearization of the inverse pinhole model,
giving a rank-1 positional covariance in the camera frame; the camera pose
then adds its translation covariance on the way to the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDepth, OutOfBounds

DEFAULT_DEPTH_VARIANCE = 0.001  # m^2, uniform fallback when no per-pixel map exists


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Pinhole camera intrinsics, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class DepthImage:
    """Per-frame depth grid with per-pixel variance and an object mask.

    Invalid depths are NaN; they are skipped, never zero-filled.
    """

    depths: np.ndarray
    variances: np.ndarray
    mask: np.ndarray
    frame_id: int

    def __post_init__(self):
        if not (self.depths.shape == self.variances.shape == self.mask.shape):
            raise ValueError("depths, variances and mask must share dimensions")
        finite = self.depths[np.isfinite(self.depths)]
        if finite.size and finite.min() <= 0:
            raise ValueError("finite depths must be positive")
        if np.any(self.variances < 0):
            raise ValueError("variances must be non-negative")


@dataclass(frozen=True)
class PoseEstimate:
    """Camera-to-world pose with translation covariance."""

    rotation: np.ndarray
    translation: np.ndarray
    translation_covariance: np.ndarray
    frame_id: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")
        C = np.asarray(self.translation_covariance, dtype=float)
        if not np.allclose(C, C.T, atol=1e-9):
            raise ValueError("translation covariance must be symmetric")
        if np.linalg.eigvalsh(C).min() < -1e-9:
            raise ValueError("translation covariance must be PSD")


@dataclass(frozen=True)
class GaussianPoint3:
    """A 3D position with mean and covariance, the unit of propagated uncertainty."""

    mean: np.ndarray
    covariance: np.ndarray
    source_frame: int = -1

    def __post_init__(self):
        C = np.asarray(self.covariance, dtype=float)
        if not np.allclose(C, C.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(C).min() < -1e-12:
            raise ValueError("covariance must be PSD")


def backprojection_ray(u: float, v: float, intr: PinholeIntrinsics) -> np.ndarray:
    """Direction ((u-cx)/fx, (v-cy)/fy, 1): both the unit-depth point and the
    Jacobian of the backprojection with respect to depth."""
    return np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])


def backproject(pixel, depth_mean: float, depth_var: float,
                intr: PinholeIntrinsics, frame_id: int = -1) -> GaussianPoint3:
    """Backproject one pixel with uncertain depth into the camera frame.

    The covariance is J * depth_var * J^T where J is the ray direction, so it
    is rank-1 (or zero when depth_var is 0).
    """
    u, v = pixel
    if not np.isfinite(depth_mean) or depth_mean <= 0:
        raise InvalidDepth(f"depth {depth_mean} at pixel ({u}, {v})")
    if depth_var < 0:
        raise ValueError("depth variance must be non-negative")
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {intr.width}x{intr.height}")
    ray = backprojection_ray(u, v, intr)
    cov = depth_var * np.outer(ray, ray)
    return GaussianPoint3(mean=depth_mean * ray, covariance=cov, source_frame=frame_id)


def to_world(pt_cam: GaussianPoint3, pose: PoseEstimate,
             rotate_camera_covariance: bool = False) -> GaussianPoint3:
    """Move a camera-frame Gaussian point into the world frame.

    Default adds the camera-frame covariance and the pose translation
    covariance without rotating the former. With rotate_camera_covariance the
    camera covariance is conjugated by the rotation first, which is the
    first-order-correct propagation.
    """
    R = pose.rotation
    mean = R @ pt_cam.mean + pose.translation
    if rotate_camera_covariance:
        cov = R @ pt_cam.covariance @ R.T + pose.translation_covariance
    else:
        cov = pt_cam.covariance + pose.translation_covariance
    cov = 0.5 * (cov + cov.T)
    return GaussianPoint3(mean=mean, covariance=cov, source_frame=pose.frame_id)


def backproject_frame(depth: DepthImage, pose: PoseEstimate, intr: PinholeIntrinsics,
                      stride: int = 1,
                      rotate_camera_covariance: bool = False) -> list[GaussianPoint3]:
    """Backproject all masked, valid pixels on the stride grid to world frame.

    Output order is deterministic row-major over the stride grid.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    points: list[GaussianPoint3] = []
    h, w = depth.depths.shape
    for v in range(0, h, stride):
        for u in range(0, w, stride):
            if not depth.mask[v, u]:
                continue
            d = depth.depths[v, u]
            if not np.isfinite(d) or d <= 0:
                continue
            pc = backproject((u, v), float(d), float(depth.variances[v, u]),
                             intr, frame_id=depth.frame_id)
            points.append(to_world(pc, pose, rotate_camera_covariance))
    return points
