"""Rigid-body math and point-cloud primitives shared by the whole pipeline.

Conventions
-----------
* Rotations are stored as 3x3 orthonormal matrices with det(R) = +1.
  Quaternions appear only transiently (orientation averaging lives in the
  pose module).
* Translations and point coordinates are in meters.
* Organized clouds keep the row/column topology of their source depth image:
  invalid pixels stay in the array as (0, 0, 0) sentinels with
  ``valid[i] = False`` so indices keep lining up with image pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .errors import DegenerateInput, EmptyCloud

ROTATION_TOL = 1e-9
NORMAL_TOL = 1e-6


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_out = rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _as_f64(self.rotation)
        t = _as_f64(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        ortho_err = np.abs(R.T @ R - np.eye(3)).max()
        if ortho_err > ROTATION_TOL:
            raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {ortho_err:.3e})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation must have det +1, got {det!r}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = _as_f64(T)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """Pose applying ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return _as_f64(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class AxisAngle:
    """Rotation as unit axis + angle in [0, pi]."""

    axis: np.ndarray
    angle: float

    def __post_init__(self):
        axis = _as_f64(self.axis).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > ROTATION_TOL:
            raise ValueError("axis must be unit length")
        if not (0.0 <= self.angle <= np.pi + 1e-12):
            raise ValueError(f"angle must lie in [0, pi], got {self.angle}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "angle", float(self.angle))


@dataclass
class PointCloud:
    """Points in meters, optional unit normals, optional image topology.

    ``valid`` is None when every point is valid.  When ``organized_dims`` is
    set, point i corresponds to pixel (i // cols, i % cols) of the source
    image and invalid pixels hold the (0, 0, 0) sentinel.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    valid: np.ndarray | None = None
    organized_dims: tuple[int, int] | None = None

    def __post_init__(self):
        self.points = _as_f64(self.points).reshape(-1, 3)
        n = len(self.points)
        if self.normals is not None:
            self.normals = _as_f64(self.normals).reshape(-1, 3)
            if len(self.normals) != n:
                raise ValueError("normals length must match points")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
            if len(self.valid) != n:
                raise ValueError("valid length must match points")
        if self.organized_dims is not None:
            rows, cols = self.organized_dims
            if rows * cols != n:
                raise ValueError(f"organized_dims {self.organized_dims} != {n} points")
        if self.normals is not None:
            norms = np.linalg.norm(self.normals[self.valid_mask()], axis=1)
            if norms.size and np.abs(norms - 1.0).max() > NORMAL_TOL:
                raise ValueError("valid normals must be unit length")

    def __len__(self) -> int:
        return len(self.points)

    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(len(self.points), dtype=bool)
        return self.valid

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask().sum())

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid_mask()]

    def valid_normals(self) -> np.ndarray | None:
        if self.normals is None:
            return None
        return self.normals[self.valid_mask()]

    def compact(self) -> "PointCloud":
        """Drop invalid points (loses image topology)."""
        m = self.valid_mask()
        return PointCloud(self.points[m],
                          None if self.normals is None else self.normals[m])


def axis_angle_between(a: np.ndarray, b: np.ndarray) -> AxisAngle:
    """Rotation taking ``a`` to ``b``, as axis-angle with angle in [0, pi].

    The returned rotation X satisfies a @ X = b.  Identical rotations give
    angle 0 with the conventional +z axis.
    """
    rel = _as_f64(a).T @ _as_f64(b)
    rotvec = ScipyRotation.from_matrix(rel).as_rotvec()
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-15:
        return AxisAngle(np.array([0.0, 0.0, 1.0]), 0.0)
    return AxisAngle(rotvec / angle, min(angle, np.pi))


def rotation_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in [0, pi] of the relative rotation between two matrices."""
    rel = _as_f64(a).T @ _as_f64(b)
    cos = (np.trace(rel) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def kabsch_align(src: PointCloud, dst: PointCloud) -> Pose:
    """Least-squares rigid transform mapping src points onto dst points.

    Inputs are correspondence sets: src[i] pairs with dst[i].  Pairs where
    either side is invalid are dropped.  Raises DegenerateInput for fewer
    than 3 usable pairs or a collinear configuration.
    """
    if len(src) != len(dst):
        raise DegenerateInput(f"point counts differ: {len(src)} vs {len(dst)}")
    pair_ok = src.valid_mask() & dst.valid_mask()
    p = src.points[pair_ok]
    q = dst.points[pair_ok]
    if len(p) < 3:
        raise DegenerateInput(f"need >= 3 valid pairs, got {len(p)}")

    cp = p.mean(axis=0)
    cq = q.mean(axis=0)
    H = (p - cp).T @ (q - cq)
    U, s, Vt = np.linalg.svd(H)
    if s[0] <= 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateInput("rank-deficient covariance (collinear points)")
    V = Vt.T
    if np.linalg.det(V @ U.T) < 0:
        V = V.copy()
        V[:, -1] *= -1.0
    R = V @ U.T
    t = cq - R @ cp
    return Pose(R, t)


def transform_cloud(pose: Pose, cloud: PointCloud) -> PointCloud:
    """Map every valid point by R p + t and every normal by R n.

    Invalid points keep their (0, 0, 0) sentinel; topology is preserved.
    """
    pts = cloud.points @ pose.rotation.T + pose.translation
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ pose.rotation.T
    if cloud.valid is not None:
        invalid = ~cloud.valid
        pts[invalid] = 0.0
        if normals is not None:
            normals[invalid] = 0.0
    return PointCloud(pts, normals,
                      None if cloud.valid is None else cloud.valid.copy(),
                      cloud.organized_dims)


def centroid(cloud: PointCloud) -> np.ndarray:
    """Arithmetic mean of the valid points."""
    pts = cloud.valid_points()
    if len(pts) == 0:
        raise EmptyCloud("centroid of a cloud with no valid points")
    return pts.mean(axis=0)


# ---------------------------------------------------------------------------
# PLY I/O.  Vertex element with float32 x/y/z and optional nx/ny/nz; ASCII or
# binary little-endian.  Only valid points are written (PLY has no notion of
# an invalid vertex), so organized topology does not survive a round trip.
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "int": ("<i4", 4), "int32": ("<i4", 4),
}


def save_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    pts = cloud.valid_points().astype(np.float32)
    nrm = cloud.valid_normals()
    props = ["property float x", "property float y", "property float z"]
    data = pts
    if nrm is not None:
        props += ["property float nx", "property float ny", "property float nz"]
        data = np.hstack([pts, nrm.astype(np.float32)])
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join(
        ["ply", f"format {fmt} 1.0", f"element vertex {len(pts)}",
         *props, "end_header", ""])
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(data.astype("<f4").tobytes())
        else:
            np.savetxt(f, data, fmt="%.9g")


def load_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header")
    if end < 0:
        raise ValueError(f"{path}: not a PLY file (no end_header)")
    header_lines = raw[:end].decode("ascii", "replace").splitlines()
    body = raw[end:]
    body = body[body.index(b"\n") + 1:]

    fmt = None
    n_vertex = None
    props: list[tuple[str, str, int]] = []
    in_vertex = False
    for line in header_lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ValueError(f"{path}: list properties on vertex not supported")
            props.append((tok[2], *_PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian") or n_vertex is None:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")

    names = [p[0] for p in props]
    if fmt == "ascii":
        rows = np.loadtxt(body.splitlines()[:n_vertex], dtype=np.float64, ndmin=2)
        table = {name: rows[:, i] for i, name in enumerate(names)}
    else:
        dt = np.dtype([(name, code) for name, code, _ in props])
        rows = np.frombuffer(body, dtype=dt, count=n_vertex)
        table = {name: rows[name].astype(np.float64) for name in names}

    pts = np.stack([table["x"], table["y"], table["z"]], axis=1)
    normals = None
    if all(k in table for k in ("nx", "ny", "nz")):
        normals = np.stack([table["nx"], table["ny"], table["nz"]], axis=1)
        lengths = np.linalg.norm(normals, axis=1)
        nz = lengths > 0
        normals[nz] /= lengths[nz][:, None]
    return PointCloud(pts, normals)
