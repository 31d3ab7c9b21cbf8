"""File formats shared across the pipeline.

Per-frame inputs live in a dataset directory:
  frame_NNNNNN.depth  - ASCII header line "OGDEPTH width height frame_id",
                        then little-endian float32 depths, row-major (NaN = invalid)
  frame_NNNNNN.var    - optional per-pixel variance grid, same layout
  frame_NNNNNN.pgm    - binary PGM object mask (nonzero = object)
  poses.csv           - frame_id, rotation row-major (9), translation (3),
                        translation covariance row-major (9)
  intrinsics.yaml     - fx, fy, cx, cy, width, height

Point clouds are ASCII PLY with the covariance upper triangle as six extra
float properties. Fields checkpoint to a little-endian float64 binary blob.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile

import numpy as np
import yaml

from .camera import DepthImage, GaussianPoint3, PinholeIntrinsics, PoseEstimate
from .errors import SchemaError
from .field import FusedOccupancyField

_DEPTH_MAGIC = "OGDEPTH"
_FIELD_MAGIC = b"FOF1"

POSE_CSV_HEADER = (["frame_id"]
                   + [f"r{i}{j}" for i in range(3) for j in range(3)]
                   + ["t0", "t1", "t2"]
                   + [f"c{i}{j}" for i in range(3) for j in range(3)])

PLY_COV_PROPS = ["cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz"]


def atomic_write(path, data: bytes) -> None:
    """Write bytes via a temp file and rename, so partial files never appear
    under the final name."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- depth / variance grids --------------------------------------------------

def save_depth_grid(path, grid: np.ndarray, frame_id: int) -> None:
    h, w = grid.shape
    header = f"{_DEPTH_MAGIC} {w} {h} {frame_id}\n".encode("ascii")
    atomic_write(path, header + np.ascontiguousarray(grid, dtype="<f4").tobytes())


def load_depth_grid(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").split()
        if len(header) != 4 or header[0] != _DEPTH_MAGIC:
            raise SchemaError(f"{path}: bad depth header")
        w, h, frame_id = int(header[1]), int(header[2]), int(header[3])
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
        if data.size != w * h:
            raise SchemaError(f"{path}: truncated depth grid")
    return data.reshape(h, w).astype(np.float64), frame_id


# -- PGM masks ----------------------------------------------------------------

def save_mask_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    body = np.where(mask, 255, 0).astype(np.uint8).tobytes()
    atomic_write(path, header + body)


def load_mask_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise SchemaError(f"{path}: only binary PGM (P5) masks are supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise SchemaError(f"{path}: truncated PGM")
    return (pixels.reshape(h, w) > 0)


# -- poses ---------------------------------------------------------------------

def save_poses_csv(path, poses: list[PoseEstimate]) -> None:
    rows = [",".join(POSE_CSV_HEADER)]
    for p in poses:
        vals = [str(p.frame_id)] + [repr(float(v)) for v in
                                    (*p.rotation.ravel(), *p.translation,
                                     *p.translation_covariance.ravel())]
        rows.append(",".join(vals))
    atomic_write(path, ("\n".join(rows) + "\n").encode("ascii"))


def load_poses_csv(path) -> dict[int, PoseEstimate]:
    poses: dict[int, PoseEstimate] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != POSE_CSV_HEADER:
            raise SchemaError(f"{path}: bad pose header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 22:
                raise SchemaError(f"{path}:{lineno}: expected 22 columns")
            frame_id = int(row[0])
            vals = np.array([float(v) for v in row[1:]])
            poses[frame_id] = PoseEstimate(
                rotation=vals[:9].reshape(3, 3),
                translation=vals[9:12],
                translation_covariance=vals[12:].reshape(3, 3),
                frame_id=frame_id)
    return poses


# -- intrinsics ------------------------------------------------------------------

def save_intrinsics(path, intr: PinholeIntrinsics) -> None:
    doc = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
           "width": intr.width, "height": intr.height}
    atomic_write(path, yaml.safe_dump(doc, sort_keys=True).encode("ascii"))


def load_intrinsics(path) -> PinholeIntrinsics:
    with open(path) as f:
        doc = yaml.safe_load(f)
    try:
        return PinholeIntrinsics(fx=float(doc["fx"]), fy=float(doc["fy"]),
                                 cx=float(doc["cx"]), cy=float(doc["cy"]),
                                 width=int(doc["width"]), height=int(doc["height"]))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None


# -- dataset frames ----------------------------------------------------------------

def frame_basename(frame_id: int) -> str:
    return f"frame_{frame_id:06d}"


def load_frame(dataset_dir, frame_id: int, default_variance: float) -> DepthImage:
    base = os.path.join(os.fspath(dataset_dir), frame_basename(frame_id))
    depths, fid = load_depth_grid(base + ".depth")
    if fid != frame_id:
        raise SchemaError(f"{base}.depth: frame_id {fid} does not match filename")
    var_path = base + ".var"
    if os.path.exists(var_path):
        variances, _ = load_depth_grid(var_path)
    else:
        variances = np.full_like(depths, default_variance)
    mask = load_mask_pgm(base + ".pgm")
    return DepthImage(depths=depths, variances=variances, mask=mask, frame_id=frame_id)


# -- PLY point clouds -----------------------------------------------------------------

def save_ply(path, points: list[GaussianPoint3]) -> None:
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
    ]
    lines += [f"property float {p}" for p in PLY_COV_PROPS]
    lines.append("end_header")
    for p in points:
        c = p.covariance
        vals = [*p.mean, c[0, 0], c[0, 1], c[0, 2], c[1, 1], c[1, 2], c[2, 2]]
        lines.append(" ".join(repr(float(v)) for v in vals))
    atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def load_ply(path) -> list[GaussianPoint3]:
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise SchemaError(f"{path}: not a PLY file")
        if f.readline().strip() != "format ascii 1.0":
            raise SchemaError(f"{path}: only ASCII PLY is supported")
        props: list[str] = []
        count = None
        for line in f:
            tokens = line.split()
            if tokens[:2] == ["element", "vertex"]:
                count = int(tokens[2])
            elif tokens[:1] == ["property"]:
                props.append(tokens[2])
            elif tokens[:1] == ["end_header"]:
                break
        expected = ["x", "y", "z"] + PLY_COV_PROPS
        if count is None or props != expected:
            raise SchemaError(f"{path}: expected vertex properties {expected}")
        points = []
        for lineno in range(count):
            vals = [float(v) for v in f.readline().split()]
            if len(vals) != 9:
                raise SchemaError(f"{path}: bad vertex line {lineno}")
            x, y, z, cxx, cxy, cxz, cyy, cyz, czz = vals
            cov = np.array([[cxx, cxy, cxz], [cxy, cyy, cyz], [cxz, cyz, czz]])
            points.append(GaussianPoint3(mean=np.array([x, y, z]), covariance=cov))
    return points


# -- field checkpoints ----------------------------------------------------------------

def save_field(path, field: FusedOccupancyField) -> None:
    """Components are stored with regularization already applied."""
    parts = [_FIELD_MAGIC, struct.pack("<Q", len(field)),
             struct.pack("<d", field.regularization)]
    for mean, cov in zip(field.means, field.covariances):
        parts.append(np.ascontiguousarray(mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(cov, dtype="<f8").tobytes())
    atomic_write(path, b"".join(parts))


def load_field(path) -> FusedOccupancyField:
    with open(path, "rb") as f:
        if f.read(4) != _FIELD_MAGIC:
            raise SchemaError(f"{path}: not a field checkpoint")
        (count,) = struct.unpack("<Q", f.read(8))
        (reg,) = struct.unpack("<d", f.read(8))
        points = []
        for _ in range(count):
            mean = np.frombuffer(f.read(24), dtype="<f8").copy()
            cov = np.frombuffer(f.read(72), dtype="<f8").reshape(3, 3).copy()
            points.append(GaussianPoint3(mean=mean, covariance=cov))
    # stored covariances already include the original regularization
    field = FusedOccupancyField(points, regularization=0.0)
    field.regularization = reg
    return field


# -- occupancy tables -------------------------------------------------------------------

def save_occupancy_csv(path, results) -> None:
    lines = ["x,y,z,mu_occ,sigma2_occ"]
    for r in results:
        lines.append(",".join(repr(float(v)) for v in
                              (*r.query_point, r.occupancy_mean, r.occupancy_variance)))
    atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def load_occupancy_csv(path) -> np.ndarray:
    """Rows of (x, y, z, mu_occ, sigma2_occ)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.zeros((0, 5))
    if data.shape[1] != 5:
        raise SchemaError(f"{path}: expected 5 columns")
    return data
