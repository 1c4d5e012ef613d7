"""Quantized-orientation templates extracted from rendered training views.

A template records, for one training view of one object, a sparse list of
discriminative features: gradient-orientation features along the silhouette
and surface-normal features in the interior, each reduced to an orientation
bin.  Libraries of templates are persisted to a versioned binary store.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import CorruptFile, EmptyMask, TooFewFeatures, VersionMismatch
from .geometry import Pose
from .render import DepthImage, NormalMap

GRADIENT = "gradient"
NORMAL = "normal"

STORE_MAGIC = b"TMSTORE\x00"
STORE_VERSION = 1

# ring cone inclination for normal quantization, degrees off the optical axis
CONE_INCLINATION_DEG = 50.0


@dataclass(frozen=True)
class Feature:
    modality: str            # GRADIENT or NORMAL
    location: tuple[int, int]  # (row, col) inside the template crop
    orientation_bin: int


@dataclass(frozen=True)
class StoreConfig:
    bins_gradient: int = 8
    bins_normal: int = 8
    feature_budget: int = 63
    min_spacing: int = 2
    gradient_threshold: float = 20.0
    min_features: int = 4

    def __post_init__(self):
        if not (2 <= self.bins_gradient <= 16 and 2 <= self.bins_normal <= 16):
            raise ValueError("bin counts must be in [2, 16]")
        if self.feature_budget < 1 or self.min_features < 1:
            raise ValueError("feature budget and min_features must be >= 1")


@dataclass
class Template:
    features: list[Feature]
    size: tuple[int, int]      # (rows, cols)
    train_pose: Pose
    train_distance: float
    object_id: str
    bins_gradient: int = 8
    bins_normal: int = 8

    def __post_init__(self):
        rows, cols = self.size
        for f in self.features:
            r, c = f.location
            if not (0 <= r < rows and 0 <= c < cols):
                raise ValueError(f"feature at {f.location} outside size {self.size}")
            limit = self.bins_gradient if f.modality == GRADIENT else self.bins_normal
            if not (0 <= f.orientation_bin < limit):
                raise ValueError(f"orientation bin {f.orientation_bin} out of range")
        if self.train_distance <= 0:
            raise ValueError("train_distance must be positive")
        origin_depth = np.linalg.norm(self.train_pose.translation)
        if abs(origin_depth - self.train_distance) > 1e-6:
            raise ValueError("train_distance must equal the posed origin depth")


@dataclass
class TemplateStore:
    objects: dict[str, list[Template]] = field(default_factory=dict)
    config: StoreConfig = field(default_factory=StoreConfig)
    version: int = STORE_VERSION

    def add(self, template: Template) -> None:
        self.objects.setdefault(template.object_id, []).append(template)

    def template(self, object_id: str, index: int) -> Template:
        return self.objects[object_id][index]

    @property
    def n_templates(self) -> int:
        return sum(len(v) for v in self.objects.values())


# ---------------------------------------------------------------------------
# Orientation quantization
# ---------------------------------------------------------------------------

def fold_orientation(angle: float | np.ndarray) -> np.ndarray:
    """Fold a gradient direction to an orientation in [0, pi)."""
    return np.mod(angle, np.pi)


def quantize_gradient(angle, bins: int = 8):
    """Half-open equal bins over [0, pi): bin k covers [k*pi/bins, (k+1)*pi/bins)."""
    folded = fold_orientation(angle)
    idx = np.floor(folded * bins / np.pi).astype(np.int64)
    return np.minimum(idx, bins - 1)  # guard angle == pi after fp rounding


def cone_axes(bins: int = 8) -> np.ndarray:
    """Camera-facing unit axes: one on the optical axis, the rest on a ring."""
    inc = np.radians(CONE_INCLINATION_DEG)
    axes = [np.array([0.0, 0.0, -1.0])]
    ring = bins - 1
    for k in range(ring):
        az = 2 * np.pi * k / ring
        axes.append(np.array([np.sin(inc) * np.cos(az),
                              np.sin(inc) * np.sin(az),
                              -np.cos(inc)]))
    return np.asarray(axes)


def quantize_normal(direction: np.ndarray, bins: int = 8):
    """Nearest cone axis by dot product; accepts (3,) or (..., 3)."""
    d = np.asarray(direction, dtype=np.float64)
    scores = d @ cone_axes(bins).T
    return np.argmax(scores, axis=-1)


def quantize_orientation(value, modality: str, bins: int = 8):
    """Gradient: scalar angle in radians.  Normal: camera-frame direction."""
    if modality == GRADIENT:
        if not np.all(np.isfinite(value)):
            raise ValueError("angle must be finite")
        return quantize_gradient(value, bins)
    if modality == NORMAL:
        return quantize_normal(value, bins)
    raise ValueError(f"unknown modality {modality!r}")


def sobel_gradients(intensity: np.ndarray):
    """(gx, gy, magnitude) of an 8-bit image via Sobel filtering."""
    img = np.asarray(intensity, dtype=np.float64)
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    return gx, gy, np.hypot(gx, gy)


# ---------------------------------------------------------------------------
# Template extraction
# ---------------------------------------------------------------------------

def extract_template(intensity: np.ndarray, depth: DepthImage,
                     normals: NormalMap, mask: np.ndarray, train_pose: Pose,
                     object_id: str,
                     config: StoreConfig = StoreConfig()) -> Template:
    """Select strong silhouette gradients and stable interior normals.

    Gradient features come from the strongest Sobel responses in a narrow
    band around the mask boundary; normal features from the most locally
    consistent valid normals inside the eroded mask.  Each modality is capped
    at ``config.feature_budget`` locations kept at least ``config.min_spacing``
    pixels apart (Chebyshev), picked greedily best-first with (row, col)
    tie-breaking, so extraction is deterministic.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.depth.shape or mask.shape != (normals.height, normals.width) \
            or mask.shape != np.asarray(intensity).shape:
        raise ValueError("intensity, depth, normals and mask dims must agree")
    if not mask.any():
        raise EmptyMask("mask selects no pixels")

    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])

    band = ndimage.binary_dilation(mask, iterations=2) \
        & ~ndimage.binary_erosion(mask, iterations=2, border_value=0)
    interior = ndimage.binary_erosion(mask, iterations=2, border_value=0) \
        & normals.valid & depth.valid_mask()

    gx, gy, mag = sobel_gradients(intensity)
    grad_ok = band & (mag >= config.gradient_threshold)
    grad_ok[:r0] = grad_ok[r1 + 1:] = False
    grad_ok[:, :c0] = grad_ok[:, c1 + 1:] = False
    grad_sites = _greedy_select(mag, grad_ok, config.feature_budget,
                                config.min_spacing)
    grad_bins = quantize_gradient(np.arctan2(gy, gx), config.bins_gradient)

    stability = _normal_stability(normals)
    norm_sites = _greedy_select(stability, interior, config.feature_budget,
                                config.min_spacing)
    norm_bins = quantize_normal(normals.normals, config.bins_normal)

    if len(grad_sites) < config.min_features:
        raise TooFewFeatures(
            f"{len(grad_sites)} gradient features < {config.min_features}")
    if len(norm_sites) < config.min_features:
        raise TooFewFeatures(
            f"{len(norm_sites)} normal features < {config.min_features}")

    features = [Feature(GRADIENT, (r - r0, c - c0), int(grad_bins[r, c]))
                for r, c in grad_sites]
    features += [Feature(NORMAL, (r - r0, c - c0), int(norm_bins[r, c]))
                 for r, c in norm_sites]
    return Template(features=features, size=(r1 - r0 + 1, c1 - c0 + 1),
                    train_pose=train_pose,
                    train_distance=float(np.linalg.norm(train_pose.translation)),
                    object_id=object_id,
                    bins_gradient=config.bins_gradient,
                    bins_normal=config.bins_normal)


def _normal_stability(normals: NormalMap) -> np.ndarray:
    """Agreement of each normal with its 3x3 neighborhood mean direction."""
    v = normals.valid.astype(np.float64)
    acc = np.zeros_like(normals.normals)
    for i in range(3):
        acc[:, :, i] = ndimage.uniform_filter(normals.normals[:, :, i] * v,
                                              size=3, mode="constant")
    lengths = np.linalg.norm(acc, axis=2)
    safe = np.where(lengths > 1e-12, lengths, 1.0)
    return np.einsum("ijk,ijk->ij", acc / safe[..., None], normals.normals)


def _greedy_select(score: np.ndarray, candidates: np.ndarray, budget: int,
                   min_spacing: int) -> list[tuple[int, int]]:
    """Best-score-first selection with a Chebyshev spacing floor."""
    rs, cs = np.nonzero(candidates)
    if len(rs) == 0:
        return []
    order = np.lexsort((cs, rs, -score[rs, cs]))
    chosen: list[tuple[int, int]] = []
    for i in order:
        r, c = int(rs[i]), int(cs[i])
        if all(max(abs(r - pr), abs(c - pc)) >= min_spacing
               for pr, pc in chosen):
            chosen.append((r, c))
            if len(chosen) == budget:
                break
    return chosen


# ---------------------------------------------------------------------------
# Persistence: .tmstore = magic | header length | JSON header | payload
# ---------------------------------------------------------------------------

_TPL_HEAD = struct.Struct("<IHHd")  # n_features, rows, cols, train_distance
_FEATURE_DTYPE = np.dtype([("modality", "u1"), ("row", "<u2"),
                           ("col", "<u2"), ("bin", "u1")])


def store_save(store: TemplateStore, path) -> None:
    """Versioned binary container: JSON header + fixed-width records."""
    chunks = []
    object_table = []
    for object_id, templates in store.objects.items():
        object_table.append({"object_id": object_id,
                             "template_count": len(templates)})
        for t in templates:
            chunks.append(_TPL_HEAD.pack(len(t.features), t.size[0], t.size[1],
                                         t.train_distance))
            pose = np.concatenate([t.train_pose.rotation.reshape(-1),
                                   t.train_pose.translation])
            chunks.append(pose.astype("<f8").tobytes())
            rec = np.zeros(len(t.features), dtype=_FEATURE_DTYPE)
            for i, f in enumerate(t.features):
                rec[i] = (0 if f.modality == GRADIENT else 1,
                          f.location[0], f.location[1], f.orientation_bin)
            chunks.append(rec.tobytes())
    payload = b"".join(chunks)
    header = {
        "version": store.version,
        "config": {
            "bins_gradient": store.config.bins_gradient,
            "bins_normal": store.config.bins_normal,
            "feature_budget": store.config.feature_budget,
            "min_spacing": store.config.min_spacing,
            "gradient_threshold": store.config.gradient_threshold,
            "min_features": store.config.min_features,
        },
        "objects": object_table,
        "payload_size": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def store_load(path) -> TemplateStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(STORE_MAGIC) + 8 or not blob.startswith(STORE_MAGIC):
        raise CorruptFile(f"{path}: not a template store")
    (head_len,) = struct.unpack_from("<Q", blob, len(STORE_MAGIC))
    head_start = len(STORE_MAGIC) + 8
    try:
        header = json.loads(blob[head_start:head_start + head_len])
    except ValueError as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    if header.get("version") != STORE_VERSION:
        raise VersionMismatch(
            f"{path}: store version {header.get('version')}, "
            f"supported {STORE_VERSION}")
    payload = blob[head_start + head_len:]
    if len(payload) != header["payload_size"]:
        raise CorruptFile(f"{path}: truncated payload "
                          f"({len(payload)} of {header['payload_size']} bytes)")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CorruptFile(f"{path}: checksum mismatch")

    config = StoreConfig(**header["config"])
    store = TemplateStore(config=config, version=header["version"])
    offset = 0
    for entry in header["objects"]:
        templates = []
        for _ in range(entry["template_count"]):
            n_feat, rows, cols, dist = _TPL_HEAD.unpack_from(payload, offset)
            offset += _TPL_HEAD.size
            pose_vals = np.frombuffer(payload, dtype="<f8", count=12,
                                      offset=offset)
            offset += 96
            rec = np.frombuffer(payload, dtype=_FEATURE_DTYPE, count=n_feat,
                                offset=offset)
            offset += n_feat * _FEATURE_DTYPE.itemsize
            features = [Feature(GRADIENT if m == 0 else NORMAL,
                                (int(r), int(c)), int(b))
                        for m, r, c, b in rec]
            templates.append(Template(
                features=features, size=(rows, cols),
                train_pose=Pose(pose_vals[:9].reshape(3, 3).copy(),
                                pose_vals[9:].copy()),
                train_distance=dist, object_id=entry["object_id"],
                bins_gradient=config.bins_gradient,
                bins_normal=config.bins_normal))
        store.objects[entry["object_id"]] = templates
    return store
