"""Initial 6-DOF pose per hypothesis and point-cloud refinement.

The initial pose averages the training orientations of the hypothesis's
dominant orientation cluster and recovers translation from the centroid
offset between the scene segment and a re-rendered model.  Refinement
smooths the scene segment (moving least squares), thins both clouds on a
voxel grid, and runs a two-stage ICP whose pair-rejection distance shrinks
each iteration from a rough (90%) to a fine (45%) fraction of the largest
correspondence distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .detection import Hypothesis, TemplateRenderer
from .errors import DegenerateCluster, DegenerateInput, EmptyCloud, EmptySegment
from .geometry import Pose, PointCloud, kabsch_align, rotation_angle
from .matching import Match
from .render import CameraIntrinsics, DepthImage, backproject, render_depth
from .templates import Template, TemplateStore


@dataclass(frozen=True)
class RefineParams:
    rough_weight: float = 0.90
    fine_weight: float = 0.45
    max_iter_rough: int = 40
    max_iter_fine: int = 60
    convergence_eps: float = 1e-10  # m^2
    mls_radius: float = 0.008
    mls_order: int = 2
    voxel_leaf: float = 0.003

    def __post_init__(self):
        if not (0.0 < self.rough_weight < 1.0 and 0.0 < self.fine_weight < 1.0):
            raise ValueError("stage weights must be in (0, 1)")
        if self.max_iter_rough < 1 or self.max_iter_fine < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.mls_order not in (1, 2):
            raise ValueError("mls_order must be 1 or 2")


@dataclass(frozen=True)
class IcpIteration:
    stage: str            # "rough" or "fine"
    d_tau: float          # pair-rejection distance used this iteration
    mse_before: float     # mean squared pair distance before the update
    mse: float            # mean squared pair distance after the update
    max_pair_distance: float  # over all pairs, before rejection
    n_pairs: int          # surviving correspondences


@dataclass
class PoseEstimate:
    pose: Pose
    fitness: float            # mean squared correspondence distance, m^2
    inlier_fraction: float    # model points within the final d_tau
    stage_log: list[IcpIteration] = field(default_factory=list)
    no_correspondences: bool = False

    def __post_init__(self):
        if self.fitness < 0:
            raise ValueError("fitness must be >= 0")
        if not (0.0 <= self.inlier_fraction <= 1.0):
            raise ValueError("inlier_fraction must be in [0, 1]")


def pose_record(object_id: str, est: PoseEstimate) -> dict:
    """JSON-ready record of a refined pose."""
    return {"object_id": object_id,
            "R": [float(x) for x in est.pose.rotation.reshape(-1)],
            "t": [float(x) for x in est.pose.translation],
            "fitness": est.fitness,
            "inlier_fraction": est.inlier_fraction}


# ---------------------------------------------------------------------------
# Orientation clustering and averaging
# ---------------------------------------------------------------------------

def cluster_orientations(members: list[tuple[Template, Match]],
                         tau_theta: float) -> list[list[tuple[Template, Match]]]:
    """Greedy single-pass clustering by rotation angle to a representative.

    Members are first ordered by descending match similarity (stable), so
    each cluster's representative (its first member) is its best match.  A
    member joins the first cluster whose representative is within
    ``tau_theta`` radians; otherwise it starts a new cluster.
    """
    if not members:
        raise ValueError("members must be non-empty")
    ordered = sorted(members, key=lambda tm: -tm[1].similarity)
    clusters: list[list[tuple[Template, Match]]] = []
    for tpl, match in ordered:
        placed = False
        for cluster in clusters:
            rep = cluster[0][0].train_pose.rotation
            if rotation_angle(rep, tpl.train_pose.rotation) < tau_theta:
                cluster.append((tpl, match))
                placed = True
                break
        if not placed:
            clusters.append([(tpl, match)])
    return clusters


def average_orientation(rotations: list[np.ndarray]) -> np.ndarray:
    """Chordal mean rotation via the principal quaternion eigenvector."""
    if not rotations:
        raise ValueError("cluster must be non-empty")
    quats = Rotation.from_matrix(np.asarray(rotations)).as_quat().reshape(-1, 4)
    ref = quats[0]
    aligned = []
    for q in quats:
        s = float(q @ ref)
        if abs(s) < 1e-9:
            raise DegenerateCluster("ambiguous quaternion sign in cluster")
        aligned.append(q if s > 0 else -q)
    aligned = np.asarray(aligned)
    if (aligned @ aligned.T < 0).any():
        raise DegenerateCluster("cluster spans more than a half-rotation")
    m = aligned.T @ aligned
    eigvals, eigvecs = np.linalg.eigh(m)
    mean_q = eigvecs[:, -1]
    return Rotation.from_quat(mean_q).as_matrix()


# ---------------------------------------------------------------------------
# Initial pose
# ---------------------------------------------------------------------------

def initial_pose(hyp: Hypothesis, store: TemplateStore,
                 scene_depth: DepthImage, cam: CameraIntrinsics,
                 renderer: TemplateRenderer,
                 tau_theta: float = np.radians(15.0)) -> Pose:
    """Averaged cluster orientation plus centroid-difference translation.

    The model is re-rendered at the averaged orientation and the training
    distance, aimed so its silhouette lands on the hypothesis position; the
    translation correction is the offset between the centroid of the scene
    points under the rendered mask and the centroid of the rendered points.
    """
    members = [(store.template(m.object_id, m.template_index), m)
               for m in hyp.member_matches]
    clusters = cluster_orientations(members, tau_theta)
    best = max(clusters, key=lambda cl: (
        len(cl), float(np.mean([m.similarity for _, m in cl]))))
    rotation = average_orientation([tpl.train_pose.rotation for tpl, _ in best])

    # aim the render: the reference member appeared at the hypothesis anchor,
    # its training view had its bbox at the renderer-reported origin
    ref_tpl, ref_match = best[0]
    _, _, _, (tr0, tc0) = renderer.view(hyp.object_id, ref_match.template_index)
    d = hyp.train_distance
    dr = hyp.position[0] - tr0
    dc = hyp.position[1] - tc0
    t_render = np.array([dc * d / cam.fx, dr * d / cam.fy, d])
    render_pose = Pose(rotation, t_render)

    model_depth, model_mask = render_depth(renderer.meshes[hyp.object_id],
                                           cam, render_pose)
    if not model_mask.any():
        raise EmptySegment("rendered model does not land in the image")
    model_cloud = backproject(model_depth, cam)
    model_centroid = model_cloud.valid_points().mean(axis=0)

    segment = model_mask & scene_depth.valid_mask()
    if not segment.any():
        raise EmptySegment("rendered mask covers no valid scene depth")
    scene_cloud = backproject(scene_depth, cam, segment)
    scene_centroid = scene_cloud.valid_points().mean(axis=0)

    return Pose(rotation, t_render + (scene_centroid - model_centroid))


def segment_scene_cloud(hyp_mask: np.ndarray, scene_depth: DepthImage,
                        cam: CameraIntrinsics) -> PointCloud:
    """Compact cloud of the scene points under a mask."""
    segment = hyp_mask & scene_depth.valid_mask()
    if not segment.any():
        raise EmptySegment("mask covers no valid scene depth")
    return backproject(scene_depth, cam, segment).compact()


# ---------------------------------------------------------------------------
# Moving least squares smoothing
# ---------------------------------------------------------------------------

def mls_smooth(cloud: PointCloud, radius: float, order: int = 2) -> PointCloud:
    """Project each point onto a local weighted polynomial surface fit.

    Gaussian weights with bandwidth radius/2; points with fewer than 5
    neighbors inside the radius pass through unchanged.  Normals are taken
    from the fitted surface, oriented to face the camera (or to agree with
    the input normal where one exists).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    pts = cloud.valid_points()
    if len(pts) == 0:
        raise EmptyCloud("nothing to smooth")
    old_normals = cloud.valid_normals()
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, r=radius)
    h = radius / 2.0
    out_pts = pts.copy()
    out_normals = np.zeros_like(pts)
    for i, idx in enumerate(neighborhoods):
        idx = np.asarray(idx)
        if len(idx) < 5:
            out_normals[i] = old_normals[i] if old_normals is not None \
                else np.array([0.0, 0.0, -1.0])
            continue
        nb = pts[idx]
        d2 = ((nb - pts[i]) ** 2).sum(axis=1)
        w = np.exp(-d2 / (2.0 * h * h))
        center = (nb * w[:, None]).sum(axis=0) / w.sum()
        centered = nb - center
        cov = (centered * w[:, None]).T @ centered
        eigvals, eigvecs = np.linalg.eigh(cov)
        normal = eigvecs[:, 0]
        e_u, e_v = eigvecs[:, 2], eigvecs[:, 1]

        u = centered @ e_u
        v = centered @ e_v
        z = centered @ normal
        cols = [np.ones_like(u), u, v]
        if order == 2:
            cols += [u * u, u * v, v * v]
        A = np.stack(cols, axis=1) * np.sqrt(w)[:, None]
        coef, *_ = np.linalg.lstsq(A, z * np.sqrt(w), rcond=None)

        rel = pts[i] - center
        ui, vi = rel @ e_u, rel @ e_v
        terms = [1.0, ui, vi] + ([ui * ui, ui * vi, vi * vi] if order == 2 else [])
        zi = float(coef @ np.asarray(terms))
        out_pts[i] = center + ui * e_u + vi * e_v + zi * normal

        dzu = coef[1] + (2 * coef[3] * ui + coef[4] * vi if order == 2 else 0.0)
        dzv = coef[2] + (coef[4] * ui + 2 * coef[5] * vi if order == 2 else 0.0)
        n_fit = normal - dzu * e_u - dzv * e_v
        n_fit /= np.linalg.norm(n_fit)
        keep = old_normals[i] if old_normals is not None else None
        if keep is not None and float(n_fit @ keep) < 0:
            n_fit = -n_fit
        elif keep is None and n_fit[2] > 0:
            n_fit = -n_fit
        out_normals[i] = n_fit
    return PointCloud(out_pts, normals=out_normals)


# ---------------------------------------------------------------------------
# Voxel grid downsampling
# ---------------------------------------------------------------------------

def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """One centroid per occupied leaf-sized voxel; normals re-averaged."""
    if leaf <= 0:
        raise ValueError("leaf must be positive")
    pts = cloud.valid_points()
    if len(pts) == 0:
        raise EmptyCloud("nothing to downsample")
    normals = cloud.valid_normals()
    keys = np.floor(pts / leaf).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    counts = np.bincount(inverse)
    out = np.zeros((len(uniq), 3))
    for axis in range(3):
        out[:, axis] = np.bincount(inverse, weights=pts[:, axis]) / counts
    if normals is None:
        return PointCloud(out)
    acc = np.zeros((len(uniq), 3))
    for axis in range(3):
        acc[:, axis] = np.bincount(inverse, weights=normals[:, axis])
    lengths = np.linalg.norm(acc, axis=1)
    safe = np.where(lengths > 1e-12, lengths, 1.0)
    acc = acc / safe[:, None]
    acc[lengths <= 1e-12] = np.array([0.0, 0.0, -1.0])
    return PointCloud(out, normals=acc)


# ---------------------------------------------------------------------------
# Rough-to-fine ICP
# ---------------------------------------------------------------------------

def icp_refine(model: PointCloud, scene: PointCloud, init: Pose,
               params: RefineParams = RefineParams()) -> PoseEstimate:
    """Two-stage point-to-point ICP with a shrinking rejection distance.

    Each stage re-initializes d_tau at the 90th percentile of current pair
    distances, then iterates: match every transformed model point to its
    nearest scene point, reject pairs beyond d_tau, align the survivors
    (Kabsch), and set the next d_tau to the stage weight times the largest
    pair distance measured before rejection.  A stage ends when the mean
    squared pair distance stops improving by ``convergence_eps`` or the
    iteration cap is reached.  If every pair is rejected the estimate so far
    is returned flagged.
    """
    model_pts = model.valid_points()
    scene_pts = scene.valid_points()
    if len(model_pts) == 0 or len(scene_pts) == 0:
        raise EmptyCloud("icp needs non-empty model and scene clouds")
    tree = cKDTree(scene_pts)
    pose = init
    log: list[IcpIteration] = []
    final_d_tau = np.inf
    flagged = False

    for stage, weight, max_iter in (("rough", params.rough_weight,
                                     params.max_iter_rough),
                                    ("fine", params.fine_weight,
                                     params.max_iter_fine)):
        moved = pose.apply(model_pts)
        dist, _ = tree.query(moved)
        d_tau = float(np.percentile(dist, 90.0))
        for _ in range(max_iter):
            moved = pose.apply(model_pts)
            dist, nn = tree.query(moved)
            max_pair = float(dist.max())
            survivors = dist <= d_tau
            n_pairs = int(survivors.sum())
            if n_pairs == 0:
                flagged = True
                break
            mse_before = float((dist[survivors] ** 2).mean())
            try:
                delta = kabsch_align(PointCloud(moved[survivors]),
                                     PointCloud(scene_pts[nn[survivors]]))
            except DegenerateInput:
                break
            pose = delta.compose(pose)
            after = pose.apply(model_pts[survivors])
            mse = float(((after - scene_pts[nn[survivors]]) ** 2)
                        .sum(axis=1).mean())
            log.append(IcpIteration(stage=stage, d_tau=d_tau,
                                    mse_before=mse_before, mse=mse,
                                    max_pair_distance=max_pair,
                                    n_pairs=n_pairs))
            final_d_tau = d_tau
            d_tau = weight * max_pair
            if mse_before - mse < params.convergence_eps:
                break
        if flagged:
            break

    moved = pose.apply(model_pts)
    dist, _ = tree.query(moved)
    if np.isfinite(final_d_tau):
        inliers = float((dist <= final_d_tau).mean())
    else:
        inliers = 0.0
    fitness = log[-1].mse if log else float((dist ** 2).mean())
    return PoseEstimate(pose=pose, fitness=fitness, inlier_fraction=inliers,
                        stage_log=log, no_correspondences=flagged)
