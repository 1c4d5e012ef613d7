"""Pipeline configuration: one TOML file drives every stage.

Every key has a default, so an empty file is a valid config; ``dump_config``
emits the complete key set and the emitted text parses back to an equal
``PipelineConfig``.  Mesh paths are resolved against the config file's
directory and must exist at load time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .pose import RefineParams
from .render import CameraIntrinsics, default_intrinsics


@dataclass(frozen=True)
class ObjectConfig:
    mesh: str
    min_cluster_size: int = 3
    collision_threshold: float = 0.7
    symmetric: bool = False

    def __post_init__(self):
        if self.min_cluster_size < 1:
            raise ConfigError("min_cluster_size must be >= 1")
        if not (0.0 <= self.collision_threshold <= 1.0):
            raise ConfigError("collision_threshold must be in [0, 1]")


@dataclass(frozen=True)
class PipelineConfig:
    camera: CameraIntrinsics = field(default_factory=default_intrinsics)
    objects: dict = field(default_factory=dict)  # id -> ObjectConfig
    # matching
    match_threshold: float = 0.8
    spread: int = 4
    stride: int = 2
    jobs: int = 1
    # clustering and suppression
    s_im: int = 8
    nms_radius: float = 0.0          # 0 = half the object's mean template side
    # pose refinement
    tau_theta_deg: float = 15.0
    refine: RefineParams = field(default_factory=RefineParams)
    # collision verification
    octree_resolution: float = 0.006
    # training sphere
    viewpoints: int = 216
    inplane_deg: tuple = (-90.0, 90.0, 15.0)   # start, stop, step
    radii: tuple = (0.4, 0.5, 0.6, 0.7, 0.8)
    # synthetic scenes
    noise_sigma: float = 0.002
    dropout: float = 0.05
    z_range: tuple = (0.45, 0.75)
    # evaluation
    k_m: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.match_threshold <= 1.0):
            raise ConfigError("match_threshold must be in (0, 1]")
        if self.spread < 0 or self.stride < 1 or self.jobs < 1:
            raise ConfigError("spread >= 0, stride >= 1, jobs >= 1 required")
        if self.s_im < 1:
            raise ConfigError("s_im must be >= 1")
        if self.nms_radius < 0:
            raise ConfigError("nms_radius must be >= 0 (0 selects the default)")
        if self.tau_theta_deg <= 0:
            raise ConfigError("tau_theta_deg must be positive")
        if self.octree_resolution <= 0:
            raise ConfigError("octree_resolution must be positive")
        if self.viewpoints < 1 or not self.radii:
            raise ConfigError("need at least one viewpoint and one radius")
        if any(r <= 0 for r in self.radii):
            raise ConfigError("radii must be positive")
        if not (0.0 <= self.dropout < 1.0) or self.noise_sigma < 0:
            raise ConfigError("dropout in [0, 1) and noise_sigma >= 0 required")
        if not (0 < self.z_range[0] <= self.z_range[1]):
            raise ConfigError("z_range must be 0 < lo <= hi")
        if not (0.0 < self.k_m):
            raise ConfigError("k_m must be positive")


def config_from_dict(data: dict, base_dir: Path | None = None,
                     check_paths: bool = True) -> PipelineConfig:
    """Build a validated config from parsed TOML, applying defaults."""
    data = dict(data)
    try:
        cam_d = data.pop("camera", {})
        cam_defaults = default_intrinsics()
        cam = CameraIntrinsics(
            fx=float(cam_d.get("fx", cam_defaults.fx)),
            fy=float(cam_d.get("fy", cam_defaults.fy)),
            cx=float(cam_d.get("cx", cam_defaults.cx)),
            cy=float(cam_d.get("cy", cam_defaults.cy)),
            width=int(cam_d.get("width", cam_defaults.width)),
            height=int(cam_d.get("height", cam_defaults.height)))

        objects = {}
        for object_id, entry in data.pop("objects", {}).items():
            entry = dict(entry)
            mesh = entry.pop("mesh", None)
            if mesh is None:
                raise ConfigError(f"objects.{object_id} needs a mesh path")
            mesh_path = Path(mesh)
            if base_dir is not None and not mesh_path.is_absolute():
                mesh_path = base_dir / mesh_path
            if check_paths and not mesh_path.is_file():
                raise ConfigError(f"mesh for {object_id} not found: {mesh_path}")
            objects[object_id] = ObjectConfig(mesh=str(mesh_path), **entry)

        matching = data.pop("matching", {})
        clustering = data.pop("clustering", {})
        pose_d = data.pop("pose", {})
        verify_d = data.pop("verify", {})
        training = data.pop("training", {})
        synth = data.pop("synth", {})
        evald = data.pop("eval", {})

        refine_fields = {f.name for f in fields(RefineParams)}
        refine_kwargs = {k: v for k, v in pose_d.items() if k in refine_fields}
        extra = set(pose_d) - refine_fields - {"tau_theta_deg"}
        if extra:
            raise ConfigError(f"unknown [pose] keys: {sorted(extra)}")

        cfg = PipelineConfig(
            camera=cam, objects=objects,
            match_threshold=float(matching.get("threshold", 0.8)),
            spread=int(matching.get("spread", 4)),
            stride=int(matching.get("stride", 2)),
            jobs=int(matching.get("jobs", 1)),
            s_im=int(clustering.get("s_im", 8)),
            nms_radius=float(clustering.get("nms_radius", 0.0)),
            tau_theta_deg=float(pose_d.get("tau_theta_deg", 15.0)),
            refine=RefineParams(**refine_kwargs),
            octree_resolution=float(verify_d.get("resolution", 0.006)),
            viewpoints=int(training.get("viewpoints", 216)),
            inplane_deg=tuple(float(x) for x in
                              training.get("inplane_deg", (-90.0, 90.0, 15.0))),
            radii=tuple(float(r) for r in
                        training.get("radii", (0.4, 0.5, 0.6, 0.7, 0.8))),
            noise_sigma=float(synth.get("noise_sigma", 0.002)),
            dropout=float(synth.get("dropout", 0.05)),
            z_range=tuple(float(z) for z in synth.get("z_range", (0.45, 0.75))),
            k_m=float(evald.get("k_m", 0.15)),
            seed=int(data.pop("seed", 0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(data)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def load_config(path, overrides: list[str] = (),
                check_paths: bool = True) -> PipelineConfig:
    """Parse a TOML config file, then apply dotted key=value overrides."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    for item in overrides:
        data = _apply_override(data, item)
    return config_from_dict(data, base_dir=path.parent,
                            check_paths=check_paths)


def _apply_override(data: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    node = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {key!r} crosses a scalar")
    node[parts[-1]] = value
    return data


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def config_to_dict(cfg: PipelineConfig) -> dict:
    cam = cfg.camera
    out = {
        "seed": cfg.seed,
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height},
        "matching": {"threshold": cfg.match_threshold, "spread": cfg.spread,
                     "stride": cfg.stride, "jobs": cfg.jobs},
        "clustering": {"s_im": cfg.s_im, "nms_radius": cfg.nms_radius},
        "pose": {"tau_theta_deg": cfg.tau_theta_deg,
                 **{f.name: getattr(cfg.refine, f.name)
                    for f in fields(RefineParams)}},
        "verify": {"resolution": cfg.octree_resolution},
        "training": {"viewpoints": cfg.viewpoints,
                     "inplane_deg": list(cfg.inplane_deg),
                     "radii": list(cfg.radii)},
        "synth": {"noise_sigma": cfg.noise_sigma, "dropout": cfg.dropout,
                  "z_range": list(cfg.z_range)},
        "eval": {"k_m": cfg.k_m},
    }
    if cfg.objects:
        out["objects"] = {
            oid: {"mesh": oc.mesh, "min_cluster_size": oc.min_cluster_size,
                  "collision_threshold": oc.collision_threshold,
                  "symmetric": oc.symmetric}
            for oid, oc in sorted(cfg.objects.items())}
    return out


def dump_config(cfg: PipelineConfig) -> str:
    """Full-key TOML text; parsing it back yields an equal config."""
    data = config_to_dict(cfg)
    lines = []
    scalars = {k: v for k, v in data.items() if not isinstance(v, dict)}
    for key, value in scalars.items():
        lines.append(f"{_toml_key(key)} = {_toml_value(value)}")
    if scalars:
        lines.append("")
    for table, content in data.items():
        if not isinstance(content, dict):
            continue
        if table == "objects":
            for oid, entry in content.items():
                lines.append(f"[objects.{_toml_key(oid)}]")
                for k, v in entry.items():
                    lines.append(f"{_toml_key(k)} = {_toml_value(v)}")
                lines.append("")
        else:
            lines.append(f"[{_toml_key(table)}]")
            for k, v in content.items():
                lines.append(f"{_toml_key(k)} = {_toml_value(v)}")
            lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def _toml_key(key: str) -> str:
    if key and all(c.isalnum() or c in "-_" for c in key):
        return key
    escaped = key.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        # TOML floats need a dot or exponent to parse as floats
        return text if ("." in text or "e" in text or "inf" in text
                        or "nan" in text) else text + ".0"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot emit config value {value!r}")
