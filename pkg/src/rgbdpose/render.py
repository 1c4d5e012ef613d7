"""Virtual camera, training-sphere sampling, depth rasterization, normals.

Image conventions
-----------------
* The camera looks down +z; x is right, y is down.  Pixel (row, col) samples
  the continuous image plane at exactly (u, v) = (col, row), which keeps the
  rasterizer and ``backproject`` bit-consistent with each other.
* Depth images store camera-z in meters, 0 = invalid.
* Normal maps are unit camera-frame normals facing the camera (n_z < 0).

The rasterizer is a deterministic z-buffer with the top-left fill rule and
no anti-aliasing, so renders are byte-reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.spatial import ConvexHull

from .geometry import Pose, PointCloud

Z_NEAR = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
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


def default_intrinsics() -> CameraIntrinsics:
    """640x480 intrinsics at the scale of a common RGB-D sensor."""
    return CameraIntrinsics(fx=572.0, fy=572.0, cx=320.0, cy=240.0,
                            width=640, height=480)


@dataclass
class DepthImage:
    width: int
    height: int
    depth: np.ndarray  # (H, W) meters, 0 = invalid

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != (self.height, self.width):
            raise ValueError(f"depth shape {self.depth.shape} != "
                             f"({self.height}, {self.width})")
        if not np.isfinite(self.depth).all():
            raise ValueError("depth must be finite")
        if (self.depth < 0).any():
            raise ValueError("depth must be >= 0 (0 marks invalid)")

    @classmethod
    def from_array(cls, depth: np.ndarray) -> "DepthImage":
        depth = np.asarray(depth, dtype=np.float64)
        return cls(width=depth.shape[1], height=depth.shape[0], depth=depth)

    def valid_mask(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class NormalMap:
    width: int
    height: int
    normals: np.ndarray  # (H, W, 3)
    valid: np.ndarray    # (H, W) bool

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.normals.shape != (self.height, self.width, 3):
            raise ValueError("normals must be (H, W, 3)")
        if self.valid.shape != (self.height, self.width):
            raise ValueError("valid must be (H, W)")
        v = self.normals[self.valid]
        if len(v):
            if np.abs(np.linalg.norm(v, axis=1) - 1.0).max() > 1e-6:
                raise ValueError("valid normals must be unit length")
            if (v[:, 2] >= 0).any():
                raise ValueError("valid normals must face the camera (n_z < 0)")


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (N, 3) object frame, meters
    triangles: np.ndarray  # (M, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) < 1:
            raise ValueError("mesh needs at least one triangle")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle indices out of range")

    def diameter(self) -> float:
        """Largest vertex-to-vertex distance (via the convex hull)."""
        pts = self.vertices
        if len(pts) > 4:
            try:
                pts = pts[ConvexHull(pts).vertices]
            except Exception:
                pass  # degenerate (flat) meshes: brute force below
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        return float(np.sqrt(d2.max()))


# ---------------------------------------------------------------------------
# Training-sphere viewpoint sampling
# ---------------------------------------------------------------------------

def fibonacci_directions(n: int) -> np.ndarray:
    """n near-uniform unit directions (Fibonacci spiral on the sphere)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def inplane_angles(start_deg: float, stop_deg: float, step_deg: float) -> np.ndarray:
    """Inclusive range of in-plane roll angles, degrees."""
    if step_deg <= 0 or stop_deg <= start_deg:
        return np.array([start_deg])
    n = int(np.floor((stop_deg - start_deg) / step_deg + 1e-9)) + 1
    return start_deg + step_deg * np.arange(n)


def look_at_pose(camera_pos: np.ndarray, radius: float) -> Pose:
    """Object-to-camera pose for a camera at ``camera_pos`` aimed at the origin."""
    fwd = -camera_pos / np.linalg.norm(camera_pos)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ ref) > 0.999:
        ref = np.array([1.0, 0.0, 0.0])
    x = np.cross(ref, fwd)
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd])
    return Pose(R, -R @ camera_pos)


def sample_viewpoints(viewpoint_count: int,
                      inplane_deg: tuple[float, float, float],
                      radii: list[float]) -> list[Pose]:
    """Object-to-camera poses covering the training sphere.

    One pose per (viewpoint x in-plane roll x radius); the object origin
    always projects onto the optical axis at depth equal to the radius.
    """
    if viewpoint_count < 4:
        raise ValueError("need at least 4 viewpoints")
    if not radii or min(radii) <= 0:
        raise ValueError("radii must be non-empty and positive")
    rolls = np.radians(inplane_angles(*inplane_deg))
    poses = []
    for d in fibonacci_directions(viewpoint_count):
        for radius in radii:
            base = look_at_pose(d * radius, radius)
            for roll in rolls:
                c, s = np.cos(roll), np.sin(roll)
                Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
                poses.append(Pose(Rz @ base.rotation, Rz @ base.translation))
    return poses


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def render_depth(mesh: TriangleMesh, cam: CameraIntrinsics,
                 pose: Pose) -> tuple[DepthImage, np.ndarray]:
    """Z-buffer rasterization of the posed mesh.

    Returns the nearest-surface depth per pixel and the coverage mask.
    Triangles with any vertex behind the near plane are dropped rather than
    clipped; an object fully behind the camera yields an empty mask.
    """
    zbuf = render_depth_multi([(mesh, pose)], cam)
    mask = np.isfinite(zbuf)
    depth = np.where(mask, zbuf, 0.0)
    return DepthImage(cam.width, cam.height, depth), mask


def render_depth_multi(instances: list[tuple[TriangleMesh, Pose]],
                       cam: CameraIntrinsics) -> np.ndarray:
    """Shared z-buffer over several posed meshes; +inf where nothing lands."""
    zbuf = np.full((cam.height, cam.width), np.inf)
    for mesh, pose in instances:
        verts = pose.apply(mesh.vertices)
        z = verts[:, 2]
        u = cam.fx * verts[:, 0] / np.where(z > 0, z, 1.0) + cam.cx
        v = cam.fy * verts[:, 1] / np.where(z > 0, z, 1.0) + cam.cy
        inv_z = 1.0 / np.where(z > 0, z, 1.0)
        for tri in mesh.triangles:
            if (z[tri] <= Z_NEAR).any():
                continue
            _raster_triangle(zbuf, u[tri], v[tri], inv_z[tri])
    return zbuf


def _raster_triangle(zbuf: np.ndarray, us: np.ndarray, vs: np.ndarray,
                     inv_zs: np.ndarray) -> None:
    h, w = zbuf.shape
    c0 = max(int(np.ceil(us.min())), 0)
    c1 = min(int(np.floor(us.max())), w - 1)
    r0 = max(int(np.ceil(vs.min())), 0)
    r1 = min(int(np.floor(vs.max())), h - 1)
    if c0 > c1 or r0 > r1:
        return

    area = (us[1] - us[0]) * (vs[2] - vs[0]) - (vs[1] - vs[0]) * (us[2] - us[0])
    if area == 0.0:
        return
    if area < 0.0:  # normalize winding so edge functions are >= 0 inside
        us, vs, inv_zs = us[::-1], vs[::-1], inv_zs[::-1]
        area = -area

    cols = np.arange(c0, c1 + 1, dtype=np.float64)
    rows = np.arange(r0, r1 + 1, dtype=np.float64)
    pc, pr = np.meshgrid(cols, rows)

    inside = np.ones(pc.shape, dtype=bool)
    inv_z_acc = np.zeros(pc.shape)
    for i in range(3):
        ax, ay = us[i], vs[i]
        bx, by = us[(i + 1) % 3], vs[(i + 1) % 3]
        e = (bx - ax) * (pr - ay) - (by - ay) * (pc - ax)
        # top-left fill rule: on-edge pixels belong to top or left edges only
        top_left = (by < ay) or (by == ay and bx > ax)
        inside &= (e > 0.0) | ((e == 0.0) & top_left)
        inv_z_acc += e * inv_zs[(i + 2) % 3]

    if not inside.any():
        return
    z = area / inv_z_acc[inside]
    view = zbuf[r0:r1 + 1, c0:c1 + 1]
    sub = view[inside]
    closer = z < sub
    sub[closer] = z[closer]
    view[inside] = sub


# ---------------------------------------------------------------------------
# Depth -> normals / points
# ---------------------------------------------------------------------------

def normals_from_depth(depth: DepthImage, cam: CameraIntrinsics,
                       discontinuity_threshold: float = 0.02) -> NormalMap:
    """Per-pixel normals from central differences of back-projected points.

    A pixel is invalid at image borders, next to invalid depth, or where the
    depth jump to a 4-neighbor exceeds ``discontinuity_threshold``.
    """
    d = depth.depth
    h, w = d.shape
    pts = _organized_points(d, cam)

    ok = depth.valid_mask()
    usable = np.zeros((h, w), dtype=bool)
    usable[1:-1, 1:-1] = (ok[1:-1, 1:-1] & ok[1:-1, :-2] & ok[1:-1, 2:]
                          & ok[:-2, 1:-1] & ok[2:, 1:-1])
    jump = np.zeros((h, w))
    jump[1:-1, 1:-1] = np.maximum.reduce([
        np.abs(d[1:-1, 2:] - d[1:-1, 1:-1]),
        np.abs(d[1:-1, :-2] - d[1:-1, 1:-1]),
        np.abs(d[2:, 1:-1] - d[1:-1, 1:-1]),
        np.abs(d[:-2, 1:-1] - d[1:-1, 1:-1]),
    ])
    usable &= jump <= discontinuity_threshold

    dx = np.zeros((h, w, 3))
    dy = np.zeros((h, w, 3))
    dx[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    dy[1:-1, :] = pts[2:, :] - pts[:-2, :]
    n = np.cross(dx, dy)
    lengths = np.linalg.norm(n, axis=2)
    usable &= lengths > 1e-12
    n[usable] /= lengths[usable][..., None]
    flip = usable & (n[:, :, 2] > 0)
    n[flip] *= -1.0
    usable &= n[:, :, 2] < 0
    n[~usable] = 0.0
    return NormalMap(w, h, n, usable)


def _organized_points(d: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    h, w = d.shape
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
    x = (cols - cam.cx) * d / cam.fx
    y = (rows - cam.cy) * d / cam.fy
    return np.stack([x, y, d], axis=2)


def backproject(depth: DepthImage, cam: CameraIntrinsics,
                mask: np.ndarray | None = None) -> PointCloud:
    """Organized cloud: pixel (u, v, d) -> ((u-cx)d/fx, (v-cy)d/fy, d).

    Invalid or unmasked pixels become (0, 0, 0) sentinels flagged invalid.
    """
    valid = depth.valid_mask()
    if mask is not None:
        if mask.shape != valid.shape:
            raise ValueError("mask dimensions must match depth")
        valid = valid & mask.astype(bool)
    pts = _organized_points(depth.depth, cam)
    pts[~valid] = 0.0
    return PointCloud(pts.reshape(-1, 3), valid=valid.reshape(-1),
                      organized_dims=(depth.height, depth.width))


def shade_intensity(normals: NormalMap, light_dir: np.ndarray) -> np.ndarray:
    """Lambertian 8-bit shading; ``light_dir`` points from surface to light."""
    l = np.asarray(light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    lam = np.clip(normals.normals @ l, 0.0, 1.0)
    img = np.rint(lam * 255.0)
    img[~normals.valid] = 0.0
    return img.astype(np.uint8)


def smooth_depth(depth: DepthImage, sigma_px: float = 1.5, radius_px: int = 3,
                 discontinuity_threshold: float = 0.02) -> DepthImage:
    """Edge-aware Gaussian smoothing of a depth image.

    Neighbors participate only when valid and within the discontinuity
    threshold of the center pixel, so object boundaries stay crisp.  Invalid
    pixels stay invalid.
    """
    d = depth.depth
    ok = depth.valid_mask()
    acc = np.zeros_like(d)
    wacc = np.zeros_like(d)
    for di in range(-radius_px, radius_px + 1):
        for dj in range(-radius_px, radius_px + 1):
            w = np.exp(-(di * di + dj * dj) / (2.0 * sigma_px * sigma_px))
            shifted = _shift2d(d, di, dj)
            sok = _shift2d(ok.astype(np.float64), di, dj) > 0
            use = ok & sok & (np.abs(shifted - d) <= discontinuity_threshold)
            acc[use] += w * shifted[use]
            wacc[use] += w
    out = np.where(wacc > 0, acc / np.where(wacc > 0, wacc, 1.0), 0.0)
    return DepthImage(depth.width, depth.height, out)


def _shift2d(a: np.ndarray, di: int, dj: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape
    src_r = slice(max(0, -di), min(h, h - di))
    dst_r = slice(max(0, di), min(h, h + di))
    src_c = slice(max(0, -dj), min(w, w - dj))
    dst_c = slice(max(0, dj), min(w, w + dj))
    out[dst_r, dst_c] = a[src_r, src_c]
    return out


# ---------------------------------------------------------------------------
# Mesh primitives (test fixtures, synthetic scenes, demo objects)
# ---------------------------------------------------------------------------

def box_mesh(sx: float, sy: float, sz: float) -> TriangleMesh:
    """Axis-aligned box centered at the origin."""
    hx, hy, hz = sx / 2, sy / 2, sz / 2
    v = np.array([[-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
                  [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz]])
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                  [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
                  [1, 2, 6], [1, 6, 5], [3, 0, 4], [3, 4, 7]])
    return TriangleMesh(v, f)


def sphere_mesh(radius: float, subdivisions: int = 3) -> TriangleMesh:
    """Icosphere: subdivided icosahedron projected onto the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [tuple(p) for p in v]
    cache: dict[tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key not in cache:
            m = np.asarray(verts[a]) + np.asarray(verts[b])
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(tuple(m))
        return cache[key]

    for _ in range(subdivisions):
        nxt = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nxt
    return TriangleMesh(np.asarray(verts) * radius, np.asarray(f))


def cylinder_mesh(radius: float, height: float, segments: int = 48) -> TriangleMesh:
    """Closed cylinder, axis along z, centered at the origin."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    top = np.hstack([ring, np.full((segments, 1), height / 2)])
    bot = np.hstack([ring, np.full((segments, 1), -height / 2)])
    verts = np.vstack([top, bot, [[0, 0, height / 2]], [[0, 0, -height / 2]]])
    ct, cb = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + i), (j, segments + j, segments + i),
                  (ct, j, i), (cb, segments + i, segments + j)]
    return TriangleMesh(verts, np.asarray(faces))


# ---------------------------------------------------------------------------
# File I/O: meshes (OBJ) and images (PNG)
# ---------------------------------------------------------------------------

def load_obj(path) -> TriangleMesh:
    """Minimal OBJ reader: v/f records, polygons fan-triangulated."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not faces:
        raise ValueError(f"{path}: no faces found")
    return TriangleMesh(np.asarray(verts), np.asarray(faces))


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def save_depth_png(depth: DepthImage, path) -> None:
    """16-bit grayscale PNG, value = millimeters, 0 = invalid."""
    mm = np.clip(np.rint(depth.depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth_png(path) -> DepthImage:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return DepthImage.from_array(arr / 1000.0)


def save_gray_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


def load_gray_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)


def save_mask_png(mask: np.ndarray, path) -> None:
    save_gray_png(np.where(mask, 255, 0).astype(np.uint8), path)


def load_mask_png(path) -> np.ndarray:
    return load_gray_png(path) >= 128
