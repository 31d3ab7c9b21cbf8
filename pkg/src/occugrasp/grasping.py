"""Grasp candidates: geometric stub scoring, CSV ingestion, and
occupancy-variance reweighting of raw confidences.

The reweighting divides each raw confidence by the (median-normalized)
occupancy variance raised to the exponent nu, so grasps on poorly observed or
noisy geometry sink in the ranking regardless of their geometric score.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import InvalidVariance, SchemaError

logger = logging.getLogger(__name__)

GRASP_CSV_FIELDS = ["qw", "qx", "qy", "qz", "px", "py", "pz", "width", "confidence"]
GRASP_CSV_FIELDS_WEIGHTED = GRASP_CSV_FIELDS + ["occ_variance", "weighted_confidence"]


@dataclass(frozen=True)
class GraspCandidate:
    rotation: np.ndarray          # 3x3
    position: np.ndarray          # 3-vector, meters
    contact_point: np.ndarray     # 3-vector, meters
    gripper_width: float
    raw_confidence: float
    occupancy_variance: float | None = None
    weighted_confidence: float | None = None

    def __post_init__(self):
        if self.raw_confidence < 0:
            raise ValueError("raw confidence must be >= 0")


@dataclass(frozen=True)
class RankedGrasps:
    candidates: list[GraspCandidate]  # sorted by weighted confidence, descending
    nu: float
    variance_normalization: float


def reweight(candidates: list[GraspCandidate], variances, nu: float = 5.0,
             normalize: bool = True) -> RankedGrasps:
    """Divide confidences by variance^nu and sort descending.

    Variances are divided by their median first; with nu = 5 raw variances of
    order 1e-4 would otherwise overflow, and a uniform scale factors out of
    the ranking. Ties break toward lower variance, then input order.
    """
    variances = np.asarray(list(variances), dtype=float)
    if len(candidates) != len(variances):
        raise ValueError("candidates and variances must be aligned")
    if len(candidates) == 0:
        return RankedGrasps(candidates=[], nu=nu, variance_normalization=1.0)
    bad = np.nonzero(variances <= 0)[0]
    if bad.size:
        raise InvalidVariance(int(bad[0]))
    norm = float(np.median(variances)) if normalize else 1.0
    weighted = []
    for i, (cand, var) in enumerate(zip(candidates, variances)):
        c_tilde = cand.raw_confidence / (var / norm) ** nu
        weighted.append(replace(cand, occupancy_variance=float(var),
                                weighted_confidence=float(c_tilde)))
    order = sorted(range(len(weighted)),
                   key=lambda i: (-weighted[i].weighted_confidence, variances[i], i))
    return RankedGrasps(candidates=[weighted[i] for i in order], nu=nu,
                        variance_normalization=norm)


def estimate_normals(points: np.ndarray, k: int = 12) -> np.ndarray:
    """Local-PCA surface normals, oriented away from the cloud centroid."""
    points = np.asarray(points, dtype=float)
    tree = cKDTree(points)
    k = min(k + 1, len(points))
    _, idx = tree.query(points, k=k)
    centroid = points.mean(axis=0)
    normals = np.empty_like(points)
    for i in range(len(points)):
        nbrs = points[np.atleast_1d(idx[i])]
        cov = np.cov(nbrs.T)
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, 0]
        if n @ (points[i] - centroid) < 0:
            n = -n
        normals[i] = n
    return normals


def _grasp_rotation(axis: np.ndarray, approach: np.ndarray) -> np.ndarray:
    """Orthonormal grasp frame: x = closing axis, z = approach direction."""
    x = axis / np.linalg.norm(axis)
    z = approach - (approach @ x) * x
    nz = np.linalg.norm(z)
    if nz < 1e-9:
        # approach parallel to closing axis; pick any perpendicular
        z = np.cross(x, [0.0, 0.0, 1.0])
        if np.linalg.norm(z) < 1e-9:
            z = np.cross(x, [0.0, 1.0, 0.0])
        nz = np.linalg.norm(z)
    z = z / nz
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def stub_scorer(points, normals, gripper_width_max: float,
                seed: int = 0, max_pairs: int = 2000) -> list[GraspCandidate]:
    """Antipodal-pair heuristic standing in for an external grasp network.

    Samples point pairs closer than the gripper width and scores them by how
    opposed their normals are, decayed by the pair gap relative to the width.
    The grasp sits at the pair midpoint, approaching along the bisecting
    normal; the contact point is the input point nearest the midpoint.
    """
    points = np.asarray(points, dtype=float)
    normals = np.asarray(normals, dtype=float)
    if points.shape != normals.shape:
        raise ValueError("points and normals must be aligned")
    rng = np.random.default_rng(seed)
    tree = cKDTree(points)
    n = len(points)
    candidates: list[GraspCandidate] = []
    for _ in range(max_pairs):
        i = int(rng.integers(n))
        nbrs = tree.query_ball_point(points[i], gripper_width_max)
        nbrs = [j for j in nbrs if j != i]
        if not nbrs:
            continue
        j = int(nbrs[int(rng.integers(len(nbrs)))])
        gap = np.linalg.norm(points[j] - points[i])
        if gap < 1e-9:
            continue
        antipodal = max(0.0, -float(normals[i] @ normals[j]))
        confidence = antipodal * np.exp(-gap / gripper_width_max)
        if confidence <= 0:
            continue
        midpoint = 0.5 * (points[i] + points[j])
        approach = normals[i] - normals[j]
        if np.linalg.norm(approach) < 1e-9:
            approach = np.array([0.0, 0.0, 1.0])
        rot = _grasp_rotation(points[j] - points[i], approach)
        _, nearest = tree.query(midpoint)
        candidates.append(GraspCandidate(
            rotation=rot, position=midpoint, contact_point=points[nearest].copy(),
            gripper_width=float(gap), raw_confidence=float(confidence)))
    return candidates


def resolve_contact_points(candidates, cloud_points, mode: str = "nearest") -> np.ndarray:
    """Contact point per candidate, either the nearest cloud point to the grasp
    position or the mean of cloud points within the gripper closing region."""
    cloud_points = np.asarray(cloud_points, dtype=float)
    tree = cKDTree(cloud_points)
    out = np.empty((len(candidates), 3))
    for i, c in enumerate(candidates):
        if mode == "nearest":
            _, j = tree.query(c.position)
            out[i] = cloud_points[j]
        elif mode == "region":
            idx = tree.query_ball_point(c.position, 0.5 * c.gripper_width)
            if idx:
                out[i] = cloud_points[idx].mean(axis=0)
            else:
                _, j = tree.query(c.position)
                out[i] = cloud_points[j]
        else:
            raise ValueError(f"unknown contact mode {mode!r}")
    return out


def save_candidates(candidates, path, weighted: bool = False) -> None:
    fields = GRASP_CSV_FIELDS_WEIGHTED if weighted else GRASP_CSV_FIELDS
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for c in candidates:
            q = Rotation.from_matrix(c.rotation).as_quat()  # x, y, z, w
            row = [q[3], q[0], q[1], q[2], *c.position, c.gripper_width,
                   c.raw_confidence]
            if weighted:
                row += [c.occupancy_variance, c.weighted_confidence]
            writer.writerow([repr(float(v)) for v in row])


def load_candidates(path) -> list[GraspCandidate]:
    """Parse the grasp CSV schema; invariant-violating rows raise with row numbers."""
    candidates: list[GraspCandidate] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:9] != GRASP_CSV_FIELDS:
            raise SchemaError(f"{path}: bad header {header}")
        has_weights = header == GRASP_CSV_FIELDS_WEIGHTED
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if len(vals) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} columns")
            qw, qx, qy, qz, px, py, pz, width, conf = vals[:9]
            if abs(qw ** 2 + qx ** 2 + qy ** 2 + qz ** 2 - 1.0) > 1e-6:
                raise SchemaError(f"{path}:{lineno}: quaternion is not unit length")
            if conf < 0:
                raise SchemaError(f"{path}:{lineno}: negative confidence")
            if width <= 0:
                raise SchemaError(f"{path}:{lineno}: non-positive width")
            rot = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
            pos = np.array([px, py, pz])
            occ_var = vals[9] if has_weights else None
            w_conf = vals[10] if has_weights else None
            candidates.append(GraspCandidate(
                rotation=rot, position=pos, contact_point=pos.copy(),
                gripper_width=width, raw_confidence=conf,
                occupancy_variance=occ_var, weighted_confidence=w_conf))
    return candidates
