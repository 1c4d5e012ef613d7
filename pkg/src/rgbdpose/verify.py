"""Collision-rate verification of refined hypotheses against the scene.

Scene points are partitioned by an axis-aligned octree whose leaves sit on
the global voxel lattice of the requested resolution, so recursive octant
subdivision and flat voxel hashing mark identical occupied cells.  A
hypothesis is scored by the fraction of its transformed model points that
land in occupied leaves and accepted when that fraction beats a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloud
from .geometry import Pose, PointCloud

DEFAULT_RESOLUTION = 0.006     # m, 2x the refinement voxel leaf
DEFAULT_COLLISION_THRESHOLD = 0.7


@dataclass(frozen=True)
class SceneOctree:
    center: np.ndarray        # root cube center, meters
    half_extent: float        # root cube half side, meters
    resolution: float         # leaf side, meters
    depth: int                # subdivisions from root to leaf
    occupied: frozenset       # leaf lattice keys (ix, iy, iz), key = floor(p/res)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.half_extent + 1e-12 < self.resolution * (2 ** self.depth) / 2.0:
            raise ValueError("root cube too small for its depth")

    @property
    def n_occupied(self) -> int:
        return len(self.occupied)

    def leaf_bounds(self, key: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Half-open [lo, hi) corners of a leaf cell in meters."""
        lo = np.asarray(key, dtype=np.float64) * self.resolution
        return lo, lo + self.resolution

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean occupied-leaf membership per point."""
        keys = np.floor(np.asarray(points, dtype=np.float64)
                        / self.resolution).astype(np.int64)
        return np.fromiter((tuple(k) in self.occupied for k in keys),
                           dtype=bool, count=len(keys))


def build_octree(scene: PointCloud, resolution: float) -> SceneOctree:
    """Subdivide the scene's bounding cube until octants reach ``resolution``.

    The root cube is snapped to the resolution lattice with a power-of-two
    side, so every leaf is exactly one lattice cell; occupancy is decided by
    the half-open cell each point falls in.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = scene.valid_points()
    if len(pts) == 0:
        raise EmptyCloud("cannot build an octree over no points")
    keys = np.floor(pts / resolution).astype(np.int64)
    uniq = np.unique(keys, axis=0)
    kmin = uniq.min(axis=0)
    span = int((uniq.max(axis=0) - kmin).max()) + 1
    depth = max(0, int(np.ceil(np.log2(span))))
    side = resolution * (2 ** depth)

    occupied: set[tuple[int, int, int]] = set()
    _subdivide(uniq, kmin, 2 ** depth, occupied)

    origin = kmin.astype(np.float64) * resolution
    return SceneOctree(center=origin + side / 2.0, half_extent=side / 2.0,
                       resolution=resolution, depth=depth,
                       occupied=frozenset(occupied))


def _subdivide(keys: np.ndarray, lo: np.ndarray, size: int,
               occupied: set) -> None:
    """Recursive octant split over lattice keys in [lo, lo + size)."""
    if size == 1:
        occupied.add((int(lo[0]), int(lo[1]), int(lo[2])))
        return
    half = size // 2
    mid = lo + half
    upper = keys >= mid  # (n, 3) octant selector per axis
    for oct_bits in range(8):
        pick = np.array([oct_bits & 1, (oct_bits >> 1) & 1,
                         (oct_bits >> 2) & 1], dtype=bool)
        inside = (upper == pick).all(axis=1)
        if inside.any():
            child_lo = np.where(pick, mid, lo)
            _subdivide(keys[inside], child_lo, half, occupied)


def collision_rate(model: PointCloud, pose: Pose, tree: SceneOctree) -> float:
    """Fraction of transformed model points inside occupied leaves."""
    pts = model.valid_points()
    if len(pts) == 0:
        raise EmptyCloud("collision rate needs a non-empty model cloud")
    hits = tree.contains(pose.apply(pts))
    return float(hits.sum()) / float(len(pts))


def accept(phi: float, collision_threshold: float) -> bool:
    """Strict-inequality acceptance test on the collision rate."""
    if not (0.0 <= phi <= 1.0):
        raise ValueError("phi must be in [0, 1]")
    if not (0.0 <= collision_threshold <= 1.0):
        raise ValueError("collision_threshold must be in [0, 1]")
    return phi > collision_threshold
