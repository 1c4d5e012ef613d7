"""From raw matches to scored, de-duplicated object hypotheses.

Pipeline stage order: position-quantized clustering of matches, small-cluster
rejection, depth/normal consistency scoring against re-rendered training
views, then score-based non-maximum suppression per object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import Match
from .render import (
    CameraIntrinsics,
    DepthImage,
    NormalMap,
    TriangleMesh,
    normals_from_depth,
    render_depth,
)
from .templates import TemplateStore


@dataclass
class Hypothesis:
    object_id: str
    member_matches: list[Match]
    position: tuple[float, float]  # (r_obj, c_obj), may be fractional
    train_distance: float
    gamma: float | None = None
    alpha: float | None = None
    beta: float | None = None
    no_valid_pairs: bool = False

    def __post_init__(self):
        if not self.member_matches:
            raise ValueError("hypothesis needs at least one member match")
        if any(m.object_id != self.object_id for m in self.member_matches):
            raise ValueError("member matches must share the hypothesis object")
        mean_r = sum(m.position[0] for m in self.member_matches) / len(self.member_matches)
        mean_c = sum(m.position[1] for m in self.member_matches) / len(self.member_matches)
        if abs(mean_r - self.position[0]) > 1e-9 or abs(mean_c - self.position[1]) > 1e-9:
            raise ValueError("position must be the mean of member positions")
        if self.gamma is not None:
            if self.no_valid_pairs:
                if self.gamma != 0.0:
                    raise ValueError("flagged hypothesis must carry score 0")
            elif self.gamma != self.alpha * self.beta:
                raise ValueError("gamma must equal alpha * beta")

    @property
    def member_count(self) -> int:
        return len(self.member_matches)


def hypothesis_record(hyp: Hypothesis) -> dict:
    """JSON-ready summary of a scored hypothesis."""
    return {"object_id": hyp.object_id,
            "r_obj": hyp.position[0], "c_obj": hyp.position[1],
            "d": hyp.train_distance, "gamma": hyp.gamma,
            "member_count": hyp.member_count}


# ---------------------------------------------------------------------------
# Clustering and filtering
# ---------------------------------------------------------------------------

def cluster_matches(matches: list[Match], s_im: int,
                    store: TemplateStore) -> list[Hypothesis]:
    """Group matches by quantized image cell, object, and training distance.

    Matches fall into the same cluster when their positions share a cell of
    the s_im-pixel grid and their templates were trained at the same
    distance.  Each cluster's position is the arithmetic mean of its member
    positions.  Clusters come out keyed in first-appearance order.
    """
    if s_im < 1:
        raise ValueError("s_im must be >= 1")
    groups: dict[tuple, list[Match]] = {}
    for m in matches:
        d = store.template(m.object_id, m.template_index).train_distance
        key = (m.position[0] // s_im, m.position[1] // s_im, m.object_id, d)
        groups.setdefault(key, []).append(m)
    out = []
    for (_, _, object_id, d), members in groups.items():
        mean_r = sum(m.position[0] for m in members) / len(members)
        mean_c = sum(m.position[1] for m in members) / len(members)
        out.append(Hypothesis(object_id=object_id, member_matches=members,
                              position=(mean_r, mean_c), train_distance=d))
    return out


def filter_clusters(hyps: list[Hypothesis],
                    min_cluster_size: int) -> list[Hypothesis]:
    """Drop hypotheses supported by fewer than ``min_cluster_size`` matches."""
    if min_cluster_size < 1:
        raise ValueError("min_cluster_size must be >= 1")
    return [h for h in hyps if h.member_count >= min_cluster_size]


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

class TemplateRenderer:
    """Renders and caches each template's training view for scoring.

    The camera must be the one the templates were trained with, so the
    re-rendered crop is pixel-aligned with the stored template geometry.
    """

    def __init__(self, meshes: dict[str, TriangleMesh], cam: CameraIntrinsics,
                 store: TemplateStore):
        self.meshes = meshes
        self.cam = cam
        self.store = store
        self._cache: dict[tuple[str, int], tuple] = {}

    def view(self, object_id: str, template_index: int):
        """(depth crop, normal crop, valid-normal crop, bbox top-left)."""
        key = (object_id, template_index)
        if key not in self._cache:
            tpl = self.store.template(object_id, template_index)
            depth, mask = render_depth(self.meshes[object_id], self.cam,
                                       tpl.train_pose)
            nm = normals_from_depth(depth, self.cam)
            rows = np.where(mask.any(axis=1))[0]
            cols = np.where(mask.any(axis=0))[0]
            r0, c0 = int(rows[0]), int(cols[0])
            r1, c1 = r0 + tpl.size[0], c0 + tpl.size[1]
            self._cache[key] = (depth.depth[r0:r1, c0:c1].copy(),
                                nm.normals[r0:r1, c0:c1].copy(),
                                nm.valid[r0:r1, c0:c1].copy(),
                                (r0, c0))
        return self._cache[key]


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def score_hypothesis(hyp: Hypothesis, scene_depth: DepthImage,
                     scene_normals: NormalMap, store: TemplateStore,
                     renderer: TemplateRenderer) -> Hypothesis:
    """Depth/normal consistency score gamma = alpha * beta.

    For each member template, its training view is re-rendered and compared
    against the template-sized scene window anchored at the hypothesis
    position; pairs count only where both sides are valid.  alpha is
    exp(-mean over members of mean per-pixel |depth difference|), beta the
    same with normal angles in radians.  A hypothesis with no valid pairs in
    either channel is flagged and scored 0.
    """
    h_img, w_img = scene_depth.depth.shape
    r_anchor = _round_half_up(hyp.position[0])
    c_anchor = _round_half_up(hyp.position[1])
    depth_means, normal_means = [], []
    for m in hyp.member_matches:
        tpl = store.template(m.object_id, m.template_index)
        rend_depth, rend_normals, rend_nvalid, _ = renderer.view(
            m.object_id, m.template_index)
        rows, cols = tpl.size
        r0, c0 = r_anchor, c_anchor
        r1, c1 = min(r0 + rows, h_img), min(c0 + cols, w_img)
        rs, cs = max(r0, 0), max(c0, 0)
        if rs >= r1 or cs >= c1:
            continue
        win_depth = scene_depth.depth[rs:r1, cs:c1]
        win_nvalid = scene_normals.valid[rs:r1, cs:c1]
        win_normals = scene_normals.normals[rs:r1, cs:c1]
        td = rend_depth[rs - r0:r1 - r0, cs - c0:c1 - c0]
        tn = rend_normals[rs - r0:r1 - r0, cs - c0:c1 - c0]
        tnv = rend_nvalid[rs - r0:r1 - r0, cs - c0:c1 - c0]

        dpair = (win_depth > 0) & (td > 0)
        if dpair.any():
            depth_means.append(float(np.abs(win_depth[dpair] - td[dpair]).mean()))
        npair = win_nvalid & tnv
        if npair.any():
            dots = np.clip(np.einsum("ij,ij->i", win_normals[npair],
                                     tn[npair]), -1.0, 1.0)
            normal_means.append(float(np.arccos(dots).mean()))

    if not depth_means or not normal_means:
        return Hypothesis(hyp.object_id, hyp.member_matches, hyp.position,
                          hyp.train_distance, gamma=0.0, alpha=0.0, beta=0.0,
                          no_valid_pairs=True)
    alpha = float(np.exp(-np.mean(depth_means)))
    beta = float(np.exp(-np.mean(normal_means)))
    return Hypothesis(hyp.object_id, hyp.member_matches, hyp.position,
                      hyp.train_distance, gamma=alpha * beta, alpha=alpha,
                      beta=beta)


# ---------------------------------------------------------------------------
# Non-maximum suppression
# ---------------------------------------------------------------------------

def nms(hyps: list[Hypothesis], radius: float) -> list[Hypothesis]:
    """Keep hypotheses that are local score maxima within ``radius`` pixels.

    A hypothesis is suppressed when some other hypothesis of the same object
    within the radius beats it: strictly greater gamma, or equal gamma and
    smaller train distance, or both equal and earlier list position.
    Suppression is a pure predicate on the input set, so the survivor set
    does not depend on input ordering beyond the documented index tie-break.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    survivors = []
    for i, h in enumerate(hyps):
        beaten = False
        for j, other in enumerate(hyps):
            if j == i or other.object_id != h.object_id:
                continue
            dr = other.position[0] - h.position[0]
            dc = other.position[1] - h.position[1]
            if dr * dr + dc * dc > radius * radius:
                continue
            if other.gamma > h.gamma or (
                    other.gamma == h.gamma
                    and (other.train_distance < h.train_distance
                         or (other.train_distance == h.train_distance and j < i))):
                beaten = True
                break
        if not beaten:
            survivors.append(h)
    return survivors


def default_nms_radius(store: TemplateStore, object_id: str) -> float:
    """Half the mean template side length of the object's library."""
    templates = store.objects[object_id]
    sides = [s for t in templates for s in t.size]
    return 0.5 * float(np.mean(sides))
