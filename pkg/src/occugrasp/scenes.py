"""Synthetic multi-view depth datasets with known ground truth.

Analytic signed-distance shapes are sphere-traced from object-centric orbit
cameras. Depth noise, pose translation noise, and a contiguous-azimuth view
dropout reproduce the complete / partial / noisy-partial capture regimes.
All randomness flows from per-frame seeds derived from the spec seed, so a
dataset is a deterministic function of its spec.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
import yaml

from .camera import DepthImage, PinholeIntrinsics, PoseEstimate
from .errors import CameraInsideGeometry
from . import io as og_io

_HIT_EPS = 1e-5
_MAX_STEPS = 256

NOISY_DEPTH_VARIANCE = 0.01    # noisy-regime depth variance
DEFAULT_DEPTH_VARIANCE = 0.001


# -- signed distance shapes ----------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    radius: float
    center: tuple = (0.0, 0.0, 0.0)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def to_dict(self):
        return {"type": "sphere", "radius": self.radius, "center": list(self.center)}


@dataclass(frozen=True)
class Box:
    extents: tuple  # full side lengths

    def sdf(self, p: np.ndarray) -> np.ndarray:
        half = 0.5 * np.asarray(self.extents)
        q = np.abs(p) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def to_dict(self):
        return {"type": "box", "extents": list(self.extents)}


@dataclass(frozen=True)
class Cylinder:
    radius: float
    height: float  # full height, axis z

    def sdf(self, p: np.ndarray) -> np.ndarray:
        radial = np.linalg.norm(p[..., :2], axis=-1) - self.radius
        axial = np.abs(p[..., 2]) - 0.5 * self.height
        q = np.stack([radial, axial], axis=-1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def to_dict(self):
        return {"type": "cylinder", "radius": self.radius, "height": self.height}


@dataclass(frozen=True)
class Torus:
    major_radius: float
    minor_radius: float
    center: tuple = (0.0, 0.0, 0.0)
    # unit axis of the torus's symmetry axis
    axis: tuple = (0.0, 0.0, 1.0)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        a = np.asarray(self.axis) / np.linalg.norm(self.axis)
        axial = q @ a
        radial = np.linalg.norm(q - np.multiply.outer(axial, a), axis=-1)
        ring = np.stack([radial - self.major_radius, axial], axis=-1)
        return np.linalg.norm(ring, axis=-1) - self.minor_radius

    def to_dict(self):
        return {"type": "torus", "major_radius": self.major_radius,
                "minor_radius": self.minor_radius,
                "center": list(self.center), "axis": list(self.axis)}


@dataclass(frozen=True)
class Union:
    parts: tuple

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.minimum.reduce([s.sdf(p) for s in self.parts])

    def to_dict(self):
        return {"type": "union", "parts": [s.to_dict() for s in self.parts]}


@dataclass(frozen=True)
class Transformed:
    """A shape placed in the world by a rigid transform."""

    shape: object
    rotation: tuple = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
    translation: tuple = (0.0, 0.0, 0.0)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        R = np.asarray(self.rotation, dtype=float)
        local = (p - np.asarray(self.translation)) @ R  # R^T applied row-wise
        return self.shape.sdf(local)

    def to_dict(self):
        return {"type": "transformed", "shape": self.shape.to_dict(),
                "rotation": np.asarray(self.rotation).tolist(),
                "translation": list(self.translation)}


def kettlebell(body_radius: float = 0.12, handle_major: float = 0.07,
               handle_minor: float = 0.018) -> Union:
    """Sphere body with a torus handle standing over the top."""
    handle = Torus(major_radius=handle_major, minor_radius=handle_minor,
                   center=(0.0, 0.0, body_radius * 0.95), axis=(0.0, 1.0, 0.0))
    return Union(parts=(Sphere(radius=body_radius), handle))


def mug(radius: float = 0.05, height: float = 0.12, handle_major: float = 0.035,
        handle_minor: float = 0.01) -> Union:
    """Capped cylinder with a side torus handle."""
    handle = Torus(major_radius=handle_major, minor_radius=handle_minor,
                   center=(radius, 0.0, 0.0), axis=(0.0, 1.0, 0.0))
    return Union(parts=(Cylinder(radius=radius, height=height), handle))


_SHAPE_FACTORIES = {"sphere": Sphere, "box": Box, "cylinder": Cylinder, "torus": Torus}


def shape_from_dict(doc: dict):
    kind = doc.get("type")
    if kind == "transformed":
        return Transformed(shape=shape_from_dict(doc["shape"]),
                           rotation=tuple(tuple(r) for r in doc["rotation"]),
                           translation=tuple(doc["translation"]))
    if kind == "union":
        return Union(parts=tuple(shape_from_dict(d) for d in doc["parts"]))
    params = {k: tuple(v) if isinstance(v, list) else v
              for k, v in doc.items() if k != "type"}
    if kind == "kettlebell":
        return kettlebell(**params)
    if kind == "mug":
        return mug(**params)
    if kind not in _SHAPE_FACTORIES:
        raise ValueError(f"unknown shape type {kind!r}")
    return _SHAPE_FACTORIES[kind](**params)


def sdf_normal(shape, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference SDF gradient, normalized."""
    p = np.asarray(p, dtype=float)
    g = np.empty(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[i] = (shape.sdf(p + e) - shape.sdf(p - e)) / (2 * h)
    return g / np.linalg.norm(g)


# -- scene spec ------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    orbit_radius: float = 1.0
    elevation: tuple = (0.3, 0.3)       # radians, (min, max)
    azimuth: tuple = (0.0, 2.0 * math.pi)  # radians, (start, end), end exclusive
    frame_count: int = 12


@dataclass(frozen=True)
class SceneSpec:
    shape: object
    trajectory: Trajectory = dc_field(default_factory=Trajectory)
    depth_noise_var: float = DEFAULT_DEPTH_VARIANCE
    pose_noise_cov: np.ndarray = dc_field(default_factory=lambda: np.zeros((3, 3)))
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.trajectory.frame_count < 1:
            raise ValueError("frame count must be >= 1")
        if self.depth_noise_var < 0:
            raise ValueError("depth noise variance must be >= 0")

    def to_dict(self) -> dict:
        t = self.trajectory
        return {
            "shape": self.shape.to_dict(),
            "trajectory": {"orbit_radius": t.orbit_radius,
                           "elevation": list(t.elevation),
                           "azimuth": list(t.azimuth),
                           "frame_count": t.frame_count},
            "depth_noise_var": self.depth_noise_var,
            "pose_noise_cov": np.asarray(self.pose_noise_cov).ravel().tolist(),
            "dropout": self.dropout,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SceneFrame:
    depth: DepthImage
    pose: PoseEstimate        # noisy, what the pipeline sees
    true_pose: PoseEstimate   # noise-free, for oracles
    intrinsics: PinholeIntrinsics


DEFAULT_INTRINSICS = PinholeIntrinsics(fx=60.0, fy=60.0, cx=32.0, cy=32.0,
                                       width=64, height=64)


def look_at_pose(position: np.ndarray, target: np.ndarray, frame_id: int) -> PoseEstimate:
    """Camera-to-world pose with +z toward the target, y pointing down-ish."""
    position = np.asarray(position, dtype=float)
    z = target - position
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.column_stack([x, y, z])
    return PoseEstimate(rotation=R, translation=position,
                        translation_covariance=np.zeros((3, 3)), frame_id=frame_id)


def orbit_poses(traj: Trajectory) -> list[PoseEstimate]:
    """Evenly spaced look-at cameras on the orbit, ordered by azimuth."""
    n = traj.frame_count
    az = np.linspace(traj.azimuth[0], traj.azimuth[1], n, endpoint=False)
    el = np.linspace(traj.elevation[0], traj.elevation[1], n)
    poses = []
    for i in range(n):
        pos = traj.orbit_radius * np.array([
            math.cos(el[i]) * math.cos(az[i]),
            math.cos(el[i]) * math.sin(az[i]),
            math.sin(el[i]),
        ])
        poses.append(look_at_pose(pos, np.zeros(3), frame_id=i))
    return poses


def _sphere_trace(shape, origin: np.ndarray, dirs: np.ndarray,
                  max_range: float) -> np.ndarray:
    """Depth (scale along the non-unit ray directions) per ray; NaN = miss."""
    n = dirs.shape[0]
    norms = np.linalg.norm(dirs, axis=1)
    s = np.zeros(n)
    depth = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)
    for _ in range(_MAX_STEPS):
        if not active.any():
            break
        p = origin + s[active, None] * dirs[active]
        dist = shape.sdf(p)
        hit = dist < _HIT_EPS
        idx = np.nonzero(active)[0]
        depth[idx[hit]] = s[active][hit]
        s[idx] += np.maximum(dist, 0.0) / norms[active]
        still = ~hit & (s[idx] <= max_range)
        active[idx] = still
    return depth


def render_frame(spec: SceneSpec, camera_pose: PoseEstimate, intr: PinholeIntrinsics,
                 rng: np.random.Generator | None = None) -> SceneFrame:
    """Sphere-trace one depth frame and apply the spec's noise model.

    Depth is the z-depth (scale of the unit-z camera ray); hit pixels form the
    mask. Depth noise and the pose translation perturbation come from `rng`.
    """
    if spec.shape.sdf(camera_pose.translation) <= 0:
        raise CameraInsideGeometry(f"camera at {camera_pose.translation}")
    rng = rng or np.random.default_rng(spec.seed)
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    rays_cam = np.stack([(us.ravel() - intr.cx) / intr.fx,
                         (vs.ravel() - intr.cy) / intr.fy,
                         np.ones(h * w)], axis=1)
    rays_world = rays_cam @ camera_pose.rotation.T
    max_range = 3.0 * (np.linalg.norm(camera_pose.translation) + 1.0)
    depth = _sphere_trace(spec.shape, camera_pose.translation, rays_world, max_range)
    depth = depth.reshape(h, w)
    mask = np.isfinite(depth)
    if spec.depth_noise_var > 0:
        noise = rng.normal(0.0, math.sqrt(spec.depth_noise_var), size=depth.shape)
        depth = np.where(mask, np.maximum(depth + noise, 1e-3), np.nan)
    variances = np.full(depth.shape, spec.depth_noise_var)
    depth_img = DepthImage(depths=depth, variances=variances, mask=mask,
                           frame_id=camera_pose.frame_id)
    cov = np.asarray(spec.pose_noise_cov, dtype=float)
    if np.any(cov):
        L = np.linalg.cholesky(cov + 1e-18 * np.eye(3))
        t_noisy = camera_pose.translation + L @ rng.standard_normal(3)
    else:
        t_noisy = camera_pose.translation.copy()
    noisy_pose = PoseEstimate(rotation=camera_pose.rotation, translation=t_noisy,
                              translation_covariance=cov, frame_id=camera_pose.frame_id)
    return SceneFrame(depth=depth_img, pose=noisy_pose, true_pose=camera_pose,
                      intrinsics=intr)


def dropped_frame_ids(spec: SceneSpec) -> list[int]:
    """Contiguous azimuth arc of frames removed by the dropout fraction."""
    n = spec.trajectory.frame_count
    n_drop = int(round(spec.dropout * n))
    if n_drop == 0:
        return []
    start = int(np.random.default_rng(spec.seed).integers(n))
    return [(start + i) % n for i in range(n_drop)]


def generate_dataset(spec: SceneSpec, out_dir,
                     intr: PinholeIntrinsics = DEFAULT_INTRINSICS) -> dict:
    """Render the full trajectory and write the dataset directory.

    Writes per-frame depth/variance/mask files, noisy and true pose tables,
    intrinsics, and a manifest echoing the spec. Returns the manifest dict.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    poses = orbit_poses(spec.trajectory)
    dropped = set(dropped_frame_ids(spec))
    children = np.random.SeedSequence(spec.seed).spawn(len(poses))
    frames_meta = []
    kept_poses, true_poses = [], []
    az = np.linspace(spec.trajectory.azimuth[0], spec.trajectory.azimuth[1],
                     len(poses), endpoint=False)
    el = np.linspace(spec.trajectory.elevation[0], spec.trajectory.elevation[1],
                     len(poses))
    for i, pose in enumerate(poses):
        if i in dropped:
            continue
        frame = render_frame(spec, pose, intr, rng=np.random.default_rng(children[i]))
        base = os.path.join(out_dir, og_io.frame_basename(i))
        og_io.save_depth_grid(base + ".depth", frame.depth.depths, i)
        og_io.save_depth_grid(base + ".var", frame.depth.variances, i)
        og_io.save_mask_pgm(base + ".pgm", frame.depth.mask)
        kept_poses.append(frame.pose)
        true_poses.append(frame.true_pose)
        frames_meta.append({"frame_id": i, "azimuth": float(az[i]),
                            "elevation": float(el[i])})
    og_io.save_poses_csv(os.path.join(out_dir, "poses.csv"), kept_poses)
    og_io.save_poses_csv(os.path.join(out_dir, "true_poses.csv"), true_poses)
    og_io.save_intrinsics(os.path.join(out_dir, "intrinsics.yaml"), intr)
    regime = "noisy" if spec.depth_noise_var > DEFAULT_DEPTH_VARIANCE else "clean"
    if spec.dropout > 0:
        regime += "_partial"
    manifest = {
        "seed": spec.seed,
        "regime": regime,
        "spec": spec.to_dict(),
        "frames": frames_meta,
        "dropped_frames": sorted(dropped),
    }
    og_io.atomic_write(os.path.join(out_dir, "manifest.yaml"),
                       yaml.safe_dump(manifest, sort_keys=True).encode("ascii"))
    return manifest


def load_manifest(dataset_dir) -> dict:
    with open(os.path.join(os.fspath(dataset_dir), "manifest.yaml")) as f:
        return yaml.safe_load(f)
