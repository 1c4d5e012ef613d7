"""Sliding-window template matching over a quantized scene.

The scene is reduced to per-pixel orientation-bin bitmasks, spread over a
small neighborhood so the later sliding-window test tolerates a few pixels
of misalignment.  A template's similarity at an image position is the mean
per-feature response, where a feature responds 1.0 when its bin is present
in the spread mask under it, a cosine partial score when an adjacent bin
is, and 0 otherwise.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .render import DepthImage, NormalMap
from .templates import (
    GRADIENT,
    NORMAL,
    StoreConfig,
    Template,
    TemplateStore,
    cone_axes,
    quantize_gradient,
    quantize_normal,
    sobel_gradients,
)

# cone axes this many degrees apart (or closer) count as adjacent bins
NORMAL_ADJACENCY_DEG = 55.0


@dataclass
class QuantizedScene:
    width: int
    height: int
    spread_radius: int
    gradient_bits: np.ndarray  # (H, W) uint16, spread bin bitmask
    normal_bits: np.ndarray    # (H, W) uint16, spread bin bitmask
    config: StoreConfig

    def __post_init__(self):
        for bits in (self.gradient_bits, self.normal_bits):
            if bits.shape != (self.height, self.width):
                raise ValueError("bitmask dims must equal image dims")
        self._luts: dict[tuple[str, int], np.ndarray] = {}

    def response_lut(self, modality: str, orientation_bin: int) -> np.ndarray:
        """65536-entry table: spread-mask value -> feature response."""
        key = (modality, orientation_bin)
        if key not in self._luts:
            if modality == GRADIENT:
                adj = _gradient_adjacency(self.config.bins_gradient)
                partial = np.cos(np.pi / self.config.bins_gradient)
            else:
                adj = _normal_adjacency(self.config.bins_normal)
                partial = np.cos(np.pi / self.config.bins_normal)
            exact_bit = 1 << orientation_bin
            adj_bits = 0
            for other in adj[orientation_bin]:
                adj_bits |= 1 << other
            values = np.arange(65536, dtype=np.uint32)
            lut = np.zeros(65536)
            lut[(values & adj_bits) != 0] = partial
            lut[(values & exact_bit) != 0] = 1.0
            self._luts[key] = lut
        return self._luts[key]


def _gradient_adjacency(bins: int) -> list[list[int]]:
    """Orientation space is cyclic with period pi: neighbors wrap around."""
    return [[(b - 1) % bins, (b + 1) % bins] for b in range(bins)]


def _normal_adjacency(bins: int) -> list[list[int]]:
    axes = cone_axes(bins)
    cos_thresh = np.cos(np.radians(NORMAL_ADJACENCY_DEG))
    out = []
    for b in range(bins):
        dots = axes @ axes[b]
        out.append([o for o in range(bins)
                    if o != b and dots[o] >= cos_thresh - 1e-12])
    return out


@dataclass(frozen=True)
class Match:
    object_id: str
    template_index: int
    position: tuple[int, int]  # (row, col) of the template's top-left corner
    similarity: float

    def __post_init__(self):
        if not (0.0 <= self.similarity <= 1.0):
            raise ValueError("similarity must be in [0, 1]")


def raw_orientation_bins(intensity: np.ndarray, depth: DepthImage,
                         normals: NormalMap,
                         config: StoreConfig = StoreConfig()):
    """Per-pixel (gradient bin, gradient strong mask, normal bin, normal mask)."""
    gx, gy, mag = sobel_gradients(intensity)
    grad_bin = quantize_gradient(np.arctan2(gy, gx), config.bins_gradient)
    grad_on = mag >= config.gradient_threshold
    norm_bin = quantize_normal(normals.normals, config.bins_normal)
    norm_on = normals.valid & depth.valid_mask()
    return grad_bin, grad_on, norm_bin, norm_on


def quantize_scene(intensity: np.ndarray, depth: DepthImage,
                   normals: NormalMap, spread_radius: int = 4,
                   config: StoreConfig = StoreConfig()) -> QuantizedScene:
    """Quantize both modalities and OR-spread bins over (2T+1)^2 windows."""
    if np.asarray(intensity).shape != depth.depth.shape \
            or depth.depth.shape != (normals.height, normals.width):
        raise ValueError("intensity, depth and normals dims must agree")
    grad_bin, grad_on, norm_bin, norm_on = raw_orientation_bins(
        intensity, depth, normals, config)
    grad_bits = _spread(_to_bits(grad_bin, grad_on), spread_radius)
    norm_bits = _spread(_to_bits(norm_bin, norm_on), spread_radius)
    h, w = depth.depth.shape
    return QuantizedScene(width=w, height=h, spread_radius=spread_radius,
                          gradient_bits=grad_bits, normal_bits=norm_bits,
                          config=config)


def _to_bits(bins: np.ndarray, active: np.ndarray) -> np.ndarray:
    bits = np.zeros(bins.shape, dtype=np.uint16)
    bits[active] = np.left_shift(1, bins[active]).astype(np.uint16)
    return bits


def _spread(bits: np.ndarray, radius: int) -> np.ndarray:
    """OR over the (2r+1)^2 neighborhood, separably (rows then columns)."""
    if radius == 0:
        return bits.copy()
    rows = bits.copy()
    for k in range(1, radius + 1):
        rows[k:] |= bits[:-k]
        rows[:-k] |= bits[k:]
    out = rows.copy()
    for k in range(1, radius + 1):
        out[:, k:] |= rows[:, :-k]
        out[:, :-k] |= rows[:, k:]
    return out


def similarity(template: Template, scene: QuantizedScene,
               c: tuple[int, int]) -> float:
    """Mean feature response with the template anchored at pixel c."""
    r0, c0 = c
    rows, cols = template.size
    if not (0 <= r0 <= scene.height - rows and 0 <= c0 <= scene.width - cols):
        raise ValueError(f"template does not fit at {c}")
    total = 0.0
    for f in template.features:
        img = scene.gradient_bits if f.modality == GRADIENT else scene.normal_bits
        lut = scene.response_lut(f.modality, f.orientation_bin)
        total += lut[img[r0 + f.location[0], c0 + f.location[1]]]
    return total / len(template.features)


def match_templates(scene: QuantizedScene, store: TemplateStore,
                    threshold: float = 0.8, stride: int = 2,
                    jobs: int = 1) -> list[Match]:
    """All (template, position) pairs scoring at least ``threshold``.

    Positions are scanned on a ``stride``-pixel grid; the result is ordered
    by (object, template index, row, col) regardless of ``jobs``.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError("threshold must be in (0, 1]")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    tasks = [(object_id, idx, tpl)
             for object_id, templates in store.objects.items()
             for idx, tpl in enumerate(templates)]

    def run(task) -> list[Match]:
        object_id, idx, tpl = task
        return _match_one(scene, object_id, idx, tpl, threshold, stride)

    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_template = list(pool.map(run, tasks))
    else:
        per_template = [run(t) for t in tasks]
    return [m for chunk in per_template for m in chunk]


def _match_one(scene: QuantizedScene, object_id: str, index: int,
               tpl: Template, threshold: float, stride: int) -> list[Match]:
    rows, cols = tpl.size
    if rows > scene.height or cols > scene.width:
        return []
    r_grid = np.arange(0, scene.height - rows + 1, stride)
    c_grid = np.arange(0, scene.width - cols + 1, stride)
    total = np.zeros((len(r_grid), len(c_grid)))
    for f in tpl.features:
        img = scene.gradient_bits if f.modality == GRADIENT else scene.normal_bits
        lut = scene.response_lut(f.modality, f.orientation_bin)
        window = img[r_grid[:, None] + f.location[0],
                     c_grid[None, :] + f.location[1]]
        total += lut[window]
    score = total / len(tpl.features)
    hit_r, hit_c = np.nonzero(score >= threshold)
    return [Match(object_id, index, (int(r_grid[i]), int(c_grid[j])),
                  float(score[i, j]))
            for i, j in zip(hit_r, hit_c)]
