"""Pose-error metrics, detection scoring, and synthetic scene generation.

A detection matches a ground-truth instance through a greedy one-to-one
assignment that consumes (error, detection, instance) pairs in increasing
error order.  Matched-and-accurate pairs count as true positives; any other
detection is a false positive and any unconsumed instance a false negative.
Synthetic scenes composite several posed meshes through a shared z-buffer,
then corrupt the depth with Gaussian noise, dropout, and 1 mm quantization.

Degenerate-count convention (documented and tested): precision is 0 when
there are no detections, recall is 0 when there are no instances, and F1 is
0 whenever precision + recall is 0, so an empty scene with no detections
scores 0 rather than a vacuous 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import Pose
from .render import (CameraIntrinsics, DepthImage, NormalMap, TriangleMesh,
                     load_depth_png, load_gray_png, normals_from_depth,
                     render_depth, render_depth_multi, save_depth_png,
                     save_gray_png, shade_intensity)

K_M_DEFAULT = 0.15
DEPTH_QUANTUM = 0.001  # m, matches the 16-bit millimeter PNG format


# ---------------------------------------------------------------------------
# Pose-error metrics
# ---------------------------------------------------------------------------

def add_error(mesh: TriangleMesh, est: Pose, gt: Pose) -> float:
    """Mean distance between gt- and est-transformed model vertices."""
    if len(mesh.vertices) == 0:
        raise ValueError("mesh has no vertices")
    diff = gt.apply(mesh.vertices) - est.apply(mesh.vertices)
    return float(np.linalg.norm(diff, axis=1).mean())


def adi_error(mesh: TriangleMesh, est: Pose, gt: Pose) -> float:
    """Mean nearest-vertex distance, indifferent to symmetry-equivalent poses."""
    if len(mesh.vertices) == 0:
        raise ValueError("mesh has no vertices")
    gt_pts = gt.apply(mesh.vertices)
    est_pts = est.apply(mesh.vertices)
    dist, _ = cKDTree(est_pts).query(gt_pts)
    return float(dist.mean())


def is_correct(m: float, diameter: float, k_m: float = K_M_DEFAULT) -> bool:
    """Strict threshold on the pose error relative to the object diameter."""
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    return m < k_m * diameter


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Scene container and synthesis
# ---------------------------------------------------------------------------

@dataclass
class GroundTruthScene:
    depth: DepthImage
    intensity: np.ndarray           # (H, W) uint8
    normals: NormalMap              # from the corrupted depth
    instances: list[tuple[str, Pose]]
    diameters: dict[str, float]
    cam: CameraIntrinsics
    noise_sigma: float
    dropout: float
    seed: int


def synth_scene(meshes: dict[str, TriangleMesh],
                instances: list[tuple[str, Pose]], cam: CameraIntrinsics,
                noise_sigma: float = 0.002, dropout: float = 0.05,
                seed: int = 0) -> GroundTruthScene:
    """Composite render of posed instances with sensor-style corruption.

    Mutual occlusion comes from a shared z-buffer.  Intensity is shaded from
    the clean pre-noise surface; the scene normals are then recomputed from
    the corrupted depth, as a detector would see them.
    """
    if not (0.0 <= dropout < 1.0):
        raise ValueError("dropout must be in [0, 1)")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    for object_id, pose in instances:
        _, mask = render_depth(meshes[object_id], cam, pose)
        if not mask.any():
            raise ValueError(f"instance of {object_id} renders to an empty mask")

    zbuf = render_depth_multi([(meshes[oid], pose) for oid, pose in instances],
                              cam)
    clean = np.where(np.isfinite(zbuf), zbuf, 0.0)
    clean_depth = DepthImage.from_array(clean)
    clean_normals = normals_from_depth(clean_depth, cam)
    intensity = shade_intensity(clean_normals, np.array([0.0, 0.0, -1.0]))

    rng = np.random.default_rng(seed)
    valid = clean > 0
    noisy = clean.copy()
    noisy[valid] += rng.normal(0.0, noise_sigma, int(valid.sum()))
    noisy[noisy <= 0.0] = 0.0
    drop = valid & (rng.random(clean.shape) < dropout)
    noisy[drop] = 0.0
    noisy = np.rint(noisy / DEPTH_QUANTUM) * DEPTH_QUANTUM

    depth = DepthImage.from_array(noisy)
    return GroundTruthScene(
        depth=depth, intensity=intensity,
        normals=normals_from_depth(depth, cam),
        instances=list(instances),
        diameters={oid: meshes[oid].diameter()
                   for oid in {oid for oid, _ in instances}},
        cam=cam, noise_sigma=noise_sigma, dropout=dropout, seed=seed)


def sample_instance_poses(meshes: dict[str, TriangleMesh],
                          counts: dict[str, int], cam: CameraIntrinsics,
                          rng: np.random.Generator,
                          z_range: tuple[float, float] = (0.45, 0.75),
                          clearance: float = 1.0,
                          max_tries: int = 2000) -> list[tuple[str, Pose]]:
    """Random non-interpenetrating placements fully inside the view frustum.

    Candidate positions are rejected while any pair of bounding spheres
    (circumradius about each mesh origin) overlaps, scaled by ``clearance``.
    """
    radii = {oid: float(np.linalg.norm(meshes[oid].vertices, axis=1).max())
             for oid in counts}
    placed: list[tuple[str, Pose]] = []
    for object_id in sorted(counts):
        for _ in range(counts[object_id]):
            r_b = radii[object_id]
            for attempt in range(max_tries):
                z = rng.uniform(*z_range)
                x_lo = (0 - cam.cx) * z / cam.fx + r_b
                x_hi = (cam.width - 1 - cam.cx) * z / cam.fx - r_b
                y_lo = (0 - cam.cy) * z / cam.fy + r_b
                y_hi = (cam.height - 1 - cam.cy) * z / cam.fy - r_b
                if x_lo >= x_hi or y_lo >= y_hi:
                    continue
                t = np.array([rng.uniform(x_lo, x_hi),
                              rng.uniform(y_lo, y_hi), z])
                ok = all(np.linalg.norm(t - p.translation)
                         >= clearance * (r_b + radii[oid])
                         for oid, p in placed)
                if ok:
                    rot = Rotation.random(random_state=rng).as_matrix()
                    placed.append((object_id, Pose(rot, t)))
                    break
            else:
                raise RuntimeError(
                    f"could not place {object_id} after {max_tries} tries")
    return placed


# ---------------------------------------------------------------------------
# Scene persistence
# ---------------------------------------------------------------------------

def save_scene(scene: GroundTruthScene, directory) -> None:
    """depth.png (16-bit mm) + intensity.png + gt.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_depth_png(scene.depth, directory / "depth.png")
    save_gray_png(scene.intensity, directory / "intensity.png")
    record = {
        "instances": [{"object_id": oid,
                       "R": [float(x) for x in pose.rotation.reshape(-1)],
                       "t": [float(x) for x in pose.translation]}
                      for oid, pose in scene.instances],
        "camera": {"fx": scene.cam.fx, "fy": scene.cam.fy,
                   "cx": scene.cam.cx, "cy": scene.cam.cy,
                   "width": scene.cam.width, "height": scene.cam.height},
        "noise": {"sigma": scene.noise_sigma, "dropout": scene.dropout},
        "seed": scene.seed,
        "diameters": {k: float(v) for k, v in sorted(scene.diameters.items())},
    }
    (directory / "gt.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_scene(directory) -> GroundTruthScene:
    directory = Path(directory)
    record = json.loads((directory / "gt.json").read_text())
    c = record["camera"]
    cam = CameraIntrinsics(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                           width=c["width"], height=c["height"])
    depth = load_depth_png(directory / "depth.png")
    instances = [(inst["object_id"],
                  Pose(np.array(inst["R"]).reshape(3, 3),
                       np.array(inst["t"])))
                 for inst in record["instances"]]
    return GroundTruthScene(
        depth=depth,
        intensity=load_gray_png(directory / "intensity.png"),
        normals=normals_from_depth(depth, cam),
        instances=instances,
        diameters={k: float(v) for k, v in record["diameters"].items()},
        cam=cam,
        noise_sigma=record["noise"]["sigma"],
        dropout=record["noise"]["dropout"],
        seed=record["seed"])


# ---------------------------------------------------------------------------
# Detection scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionOutcome:
    object_id: str
    det_index: int               # position in the submitted detection list
    gt_index: int | None         # matched instance index, None if unmatched
    add: float | None
    adi: float | None
    correct: bool


@dataclass(frozen=True)
class ObjectScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)


@dataclass
class EvalReport:
    per_object: dict[str, ObjectScore]
    outcomes: list[DetectionOutcome]
    k_m: float
    symmetric: frozenset = frozenset()

    @property
    def tp(self) -> int:
        return sum(s.tp for s in self.per_object.values())

    @property
    def fp(self) -> int:
        return sum(s.fp for s in self.per_object.values())

    @property
    def fn(self) -> int:
        return sum(s.fn for s in self.per_object.values())

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)


def evaluate(detections: list[tuple[str, Pose]], gt: GroundTruthScene,
             meshes: dict[str, TriangleMesh], k_m: float = K_M_DEFAULT,
             symmetric: frozenset = frozenset()) -> EvalReport:
    """Greedy smallest-error one-to-one matching, then TP/FP/FN tallies.

    The matching error is ADI for objects flagged symmetric, ADD otherwise.
    Pairs are consumed in increasing (error, detection index, instance index)
    order, so scoring does not depend on detection list order beyond that
    documented tie-break.
    """
    object_ids = sorted({oid for oid, _ in detections}
                        | {oid for oid, _ in gt.instances})
    per_object: dict[str, ObjectScore] = {}
    outcomes: list[DetectionOutcome] = []

    for object_id in object_ids:
        dets = [(i, pose) for i, (oid, pose) in enumerate(detections)
                if oid == object_id]
        gts = [(j, pose) for j, (oid, pose) in enumerate(gt.instances)
               if oid == object_id]
        mesh = meshes[object_id]
        use_adi = object_id in symmetric

        pairs = []
        for i, dpose in dets:
            for j, gpose in gts:
                a = add_error(mesh, dpose, gpose)
                s = adi_error(mesh, dpose, gpose)
                pairs.append((s if use_adi else a, i, j, a, s))
        pairs.sort(key=lambda p: (p[0], p[1], p[2]))

        det_match: dict[int, tuple[int, float, float, float]] = {}
        used_gt: set[int] = set()
        for m, i, j, a, s in pairs:
            if i in det_match or j in used_gt:
                continue
            det_match[i] = (j, m, a, s)
            used_gt.add(j)

        tp = fp = 0
        for i, _ in dets:
            if i in det_match:
                j, m, a, s = det_match[i]
                ok = is_correct(m, gt.diameters[object_id], k_m)
                outcomes.append(DetectionOutcome(object_id, i, j, a, s, ok))
                tp += ok
                fp += not ok
            else:
                outcomes.append(DetectionOutcome(object_id, i, None,
                                                 None, None, False))
                fp += 1
        fn = len(gts) - len(used_gt)
        per_object[object_id] = ObjectScore(tp=tp, fp=fp, fn=fn)

    outcomes.sort(key=lambda o: o.det_index)
    return EvalReport(per_object=per_object, outcomes=outcomes, k_m=k_m,
                      symmetric=frozenset(symmetric))


def report_record(report: EvalReport) -> dict:
    """JSON-ready form of an evaluation report."""
    return {
        "k_m": report.k_m,
        "symmetric": sorted(report.symmetric),
        "micro": {"precision": report.precision, "recall": report.recall,
                  "f1": report.f1, "tp": report.tp, "fp": report.fp,
                  "fn": report.fn},
        "per_object": {
            oid: {"tp": s.tp, "fp": s.fp, "fn": s.fn,
                  "precision": s.precision, "recall": s.recall, "f1": s.f1}
            for oid, s in sorted(report.per_object.items())},
        "detections": [
            {"object_id": o.object_id, "det_index": o.det_index,
             "gt_index": o.gt_index, "add": o.add, "adi": o.adi,
             "correct": o.correct}
            for o in report.outcomes],
    }


def report_table(report: EvalReport) -> str:
    """Fixed-width per-object summary ending with the micro-average row."""
    lines = [f"{'object':<16}{'TP':>5}{'FP':>5}{'FN':>5}"
             f"{'prec':>8}{'rec':>8}{'F1':>8}"]
    for oid, s in sorted(report.per_object.items()):
        lines.append(f"{oid:<16}{s.tp:>5}{s.fp:>5}{s.fn:>5}"
                     f"{s.precision:>8.3f}{s.recall:>8.3f}{s.f1:>8.3f}")
    lines.append(f"{'(micro)':<16}{report.tp:>5}{report.fp:>5}{report.fn:>5}"
                 f"{report.precision:>8.3f}{report.recall:>8.3f}"
                 f"{report.f1:>8.3f}")
    return "\n".join(lines)
