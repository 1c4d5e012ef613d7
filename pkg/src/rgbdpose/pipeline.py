"""End-to-end orchestration: depth image in, verified 6-DOF detections out.

Stage order: smooth + quantize the inputs, match templates, cluster matches
into hypotheses, drop small clusters, score, suppress non-maxima, estimate
an initial pose per survivor, refine it (MLS, voxel grid, two-stage ICP),
and verify by collision rate against a scene octree.  Matching and scoring
run on the edge-aware smoothed depth; all metric geometry (segmentation,
refinement, verification) uses the raw depth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .config import PipelineConfig
from .detection import (Hypothesis, TemplateRenderer, cluster_matches,
                        default_nms_radius, nms, score_hypothesis)
from .errors import ConfigError, DegenerateCluster, EmptyCloud, EmptySegment
from .geometry import Pose, PointCloud
from .matching import Match, match_templates, quantize_scene
from .pose import (PoseEstimate, icp_refine, initial_pose, mls_smooth,
                   segment_scene_cloud, voxel_downsample)
from .render import (DepthImage, TriangleMesh, backproject, load_obj,
                     normals_from_depth, render_depth, sample_viewpoints,
                     shade_intensity, smooth_depth)
from .templates import (StoreConfig, Template, TemplateStore,
                        extract_template)
from .verify import accept, build_octree, collision_rate
import numpy as np

STAGES = ("match", "cluster", "filter", "score", "nms", "initial",
          "refine", "verify")

LIGHT_DIR = np.array([0.0, 0.0, -1.0])


@dataclass
class Detection:
    object_id: str
    hypothesis: Hypothesis
    initial: Pose
    estimate: PoseEstimate | None   # None when stopped before refinement
    phi: float | None               # None when stopped before verification
    accepted: bool | None

    @property
    def pose(self) -> Pose:
        if self.estimate is not None:
            return self.estimate.pose
        return self.initial


@dataclass
class DetectionResult:
    stage: str
    matches: list[Match] = field(default_factory=list)
    hypotheses: list[Hypothesis] = field(default_factory=list)
    detections: list[Detection] = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def load_meshes(cfg: PipelineConfig,
                object_ids=None) -> dict[str, TriangleMesh]:
    ids = sorted(cfg.objects) if object_ids is None else list(object_ids)
    missing = [oid for oid in ids if oid not in cfg.objects]
    if missing:
        raise ConfigError(f"objects not in config: {missing}")
    return {oid: load_obj(cfg.objects[oid].mesh) for oid in ids}


def train_store(cfg: PipelineConfig, object_ids=None,
                store_config: StoreConfig = StoreConfig()) -> TemplateStore:
    """Render the training sphere for each object and extract templates."""
    meshes = load_meshes(cfg, object_ids)
    store = TemplateStore(config=store_config)
    poses = sample_viewpoints(cfg.viewpoints, cfg.inplane_deg, cfg.radii)
    for object_id in sorted(meshes):
        mesh = meshes[object_id]
        for pose in poses:
            depth, mask = render_depth(mesh, cfg.camera, pose)
            normals = normals_from_depth(depth, cfg.camera)
            intensity = shade_intensity(normals, LIGHT_DIR)
            store.add(extract_template(intensity, depth, normals, mask,
                                       pose, object_id, store_config))
    return store


def run_detection(cfg: PipelineConfig, store: TemplateStore,
                  meshes: dict[str, TriangleMesh], depth: DepthImage,
                  intensity: np.ndarray,
                  stop_after: str | None = None) -> DetectionResult:
    """Run the pipeline on one scene, optionally stopping after a stage."""
    stage = stop_after or "verify"
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    missing = [oid for oid in store.objects if oid not in cfg.objects]
    if missing:
        raise ConfigError(f"store objects missing from config: {missing}")
    timings: dict[str, float] = {}
    cam = cfg.camera

    t0 = time.perf_counter()
    smoothed = smooth_depth(depth)
    scene_normals = normals_from_depth(smoothed, cam)
    quantized = quantize_scene(intensity, smoothed, scene_normals,
                               spread_radius=cfg.spread, config=store.config)
    matches = match_templates(quantized, store, threshold=cfg.match_threshold,
                              stride=cfg.stride, jobs=cfg.jobs)
    timings["match"] = time.perf_counter() - t0
    if stage == "match":
        return DetectionResult(stage="match", matches=matches,
                               timings=timings)

    t0 = time.perf_counter()
    hyps = cluster_matches(matches, cfg.s_im, store)
    timings["cluster"] = time.perf_counter() - t0
    if stage == "cluster":
        return DetectionResult(stage="cluster", matches=matches,
                               hypotheses=hyps, timings=timings)

    t0 = time.perf_counter()
    hyps = [h for h in hyps
            if h.member_count >= cfg.objects[h.object_id].min_cluster_size]
    timings["filter"] = time.perf_counter() - t0
    if stage == "filter":
        return DetectionResult(stage="filter", matches=matches,
                               hypotheses=hyps, timings=timings)

    t0 = time.perf_counter()
    renderer = TemplateRenderer(meshes, cam, store)
    hyps = [score_hypothesis(h, smoothed, scene_normals, store, renderer)
            for h in hyps]
    timings["score"] = time.perf_counter() - t0
    if stage == "score":
        return DetectionResult(stage="score", matches=matches,
                               hypotheses=hyps, timings=timings)

    t0 = time.perf_counter()
    survivors: list[Hypothesis] = []
    for object_id in sorted({h.object_id for h in hyps}):
        subset = [h for h in hyps if h.object_id == object_id]
        radius = cfg.nms_radius or default_nms_radius(store, object_id)
        survivors.extend(nms(subset, radius))
    timings["nms"] = time.perf_counter() - t0
    if stage == "nms":
        return DetectionResult(stage="nms", matches=matches,
                               hypotheses=survivors, timings=timings)

    t0 = time.perf_counter()
    tau_theta = np.radians(cfg.tau_theta_deg)
    detections: list[Detection] = []
    for hyp in survivors:
        try:
            init = initial_pose(hyp, store, depth, cam, renderer,
                                tau_theta=tau_theta)
        except (EmptySegment, DegenerateCluster):
            continue
        detections.append(Detection(object_id=hyp.object_id, hypothesis=hyp,
                                    initial=init, estimate=None, phi=None,
                                    accepted=None))
    timings["initial"] = time.perf_counter() - t0
    if stage == "initial":
        return DetectionResult(stage="initial", matches=matches,
                               hypotheses=survivors, detections=detections,
                               timings=timings)

    t0 = time.perf_counter()
    refined: list[Detection] = []
    for det in detections:
        est = _refine_one(det, meshes[det.object_id], depth, cam, cfg)
        if est is None:
            continue
        refined.append(Detection(object_id=det.object_id,
                                 hypothesis=det.hypothesis,
                                 initial=det.initial, estimate=est,
                                 phi=None, accepted=None))
    detections = refined
    timings["refine"] = time.perf_counter() - t0
    if stage == "refine":
        return DetectionResult(stage="refine", matches=matches,
                               hypotheses=survivors, detections=detections,
                               timings=timings)

    t0 = time.perf_counter()
    scene_cloud = backproject(depth, cam).compact()
    verified: list[Detection] = []
    if len(scene_cloud) and detections:
        tree = build_octree(scene_cloud, cfg.octree_resolution)
    for det in detections:
        phi, ok = 0.0, False
        if len(scene_cloud):
            mdepth, mmask = render_depth(meshes[det.object_id], cam, det.pose)
            if mmask.any():
                visible = backproject(mdepth, cam, mmask).compact()
                phi = collision_rate(visible, Pose.identity(), tree)
                ok = accept(phi,
                            cfg.objects[det.object_id].collision_threshold)
        verified.append(Detection(object_id=det.object_id,
                                  hypothesis=det.hypothesis,
                                  initial=det.initial, estimate=det.estimate,
                                  phi=phi, accepted=ok))
    timings["verify"] = time.perf_counter() - t0
    return DetectionResult(stage="verify", matches=matches,
                           hypotheses=survivors, detections=verified,
                           timings=timings)


def _refine_one(det: Detection, mesh: TriangleMesh, depth: DepthImage,
                cam, cfg: PipelineConfig) -> PoseEstimate | None:
    params = cfg.refine
    mdepth, mmask = render_depth(mesh, cam, det.initial)
    if not mmask.any():
        return None
    model_cloud = voxel_downsample(backproject(mdepth, cam, mmask).compact(),
                                   params.voxel_leaf)
    try:
        segment = segment_scene_cloud(mmask, depth, cam)
        smoothed = mls_smooth(segment, params.mls_radius, params.mls_order)
        scene_cloud = voxel_downsample(smoothed, params.voxel_leaf)
    except (EmptySegment, EmptyCloud):
        return None
    delta = icp_refine(model_cloud, scene_cloud, Pose.identity(), params)
    return PoseEstimate(pose=delta.pose.compose(det.initial),
                        fitness=delta.fitness,
                        inlier_fraction=delta.inlier_fraction,
                        stage_log=delta.stage_log,
                        no_correspondences=delta.no_correspondences)


def detections_record(result: DetectionResult) -> dict:
    """JSON-ready summary of a detection run."""
    from .detection import hypothesis_record
    out: dict = {"stage": result.stage}
    if result.stage in ("match",):
        out["matches"] = [
            {"object_id": m.object_id, "template_index": m.template_index,
             "row": m.position[0], "col": m.position[1],
             "similarity": m.similarity} for m in result.matches]
    if result.stage in ("cluster", "filter", "score", "nms"):
        out["hypotheses"] = [hypothesis_record(h) for h in result.hypotheses]
    if result.stage in ("initial", "refine", "verify"):
        recs = []
        for det in result.detections:
            rec = {"object_id": det.object_id,
                   "R": [float(x) for x in det.pose.rotation.reshape(-1)],
                   "t": [float(x) for x in det.pose.translation],
                   "gamma": det.hypothesis.gamma}
            if det.estimate is not None:
                rec["fitness"] = det.estimate.fitness
                rec["inlier_fraction"] = det.estimate.inlier_fraction
            if det.phi is not None:
                rec["phi"] = det.phi
                rec["accepted"] = det.accepted
            recs.append(rec)
        out["detections"] = recs
    return out
