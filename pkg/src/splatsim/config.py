"""Pipeline configuration: one YAML file drives every stage.

Relative paths are resolved against the config file's directory. Command
line overrides use dotted keys (``-o sim.steps=10 -o clamp.lambda_S=1``);
values are parsed as YAML scalars/lists.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import re
from pathlib import Path

import yaml

from .errors import ConfigError
from .kinematics import MODES, ClampParams
from .mpm import GridConfig, Material


@dataclasses.dataclass(frozen=True)
class SegmentationConfig:
    tau_T: float = 0.5
    tau_d: float = 0.03


@dataclasses.dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-4
    steps: int = 2000
    frame_stride: int = 400
    grid_resolution: int | tuple = 64
    dx: float | None = None
    origin: tuple | None = None
    boundary_cells: int = 3
    ground_height: float | None = None
    gravity: tuple = (0.0, 0.0, -9.8)
    include_background: bool = False

    def grid(self) -> GridConfig:
        return GridConfig(self.grid_resolution, self.dx, self.origin, self.boundary_cells,
                          self.ground_height)


@dataclasses.dataclass(frozen=True)
class ClampConfig:
    tau_min: float | None = None
    tau_max: float | None = None
    lambda_R: float = 1.2
    lambda_S: float = 0.8
    mode: str = "clamped"
    orthonormalize: bool = False

    def params(self) -> ClampParams:
        return ClampParams(self.tau_min, self.tau_max, self.lambda_R, self.lambda_S)


@dataclasses.dataclass(frozen=True)
class RenderConfig:
    cameras: tuple | None = None  # names; None renders every camera
    background: tuple = (0.0, 0.0, 0.0)


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    gt_dir: Path | None = None
    cameras: tuple | None = None
    boundary_radius: int | None = None


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    scene_path: Path
    camera_set_path: Path
    mask_dir: Path
    output_dir: Path
    segmentation: SegmentationConfig = SegmentationConfig()
    materials: dict = dataclasses.field(default_factory=dict)
    default_material: Material | None = None
    sim: SimConfig = SimConfig()
    clamp: ClampConfig = ClampConfig()
    render: RenderConfig = RenderConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    backend: str | None = None
    source: dict = dataclasses.field(default_factory=dict, repr=False, compare=False)

    def material_table(self, object_ids) -> dict:
        """Materials for the given ids, falling back to ``default_material``."""
        table = {}
        for oid in object_ids:
            oid = int(oid)
            if oid in self.materials:
                table[oid] = self.materials[oid]
            elif self.default_material is not None:
                table[oid] = self.default_material
        return table

    @property
    def hash(self) -> str:
        blob = json.dumps(self.source, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_NUMBER = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?")


def _scalar(v):
    """YAML 1.1 reads ``1e-4`` (no dot) as a string; accept it as a number."""
    if isinstance(v, str) and _NUMBER.fullmatch(v.strip()):
        return float(v)
    if isinstance(v, list):
        return tuple(_scalar(x) for x in v)
    return v


def _section(cls, raw, name):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    out = {}
    for k, v in raw.items():
        out[k] = _scalar(v)
    try:
        return cls(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {name!r} section: {exc}") from exc


def _material(raw, where) -> Material:
    if not isinstance(raw, dict):
        raise ConfigError(f"material {where} must be a mapping")
    try:
        return Material(**{k: _scalar(v) for k, v in raw.items()})
    except TypeError as exc:
        raise ConfigError(f"material {where}: {exc}") from exc


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p.lstrip("-").isdigit() and int(p) in cur:
            p = int(p)
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        cur = nxt
    last = parts[-1]
    cur[int(last) if last.isdigit() else last] = value


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        _set_dotted(raw, key.strip(), yaml.safe_load(text))
    return raw


def config_from_dict(raw: dict, base_dir=".") -> PipelineConfig:
    base = Path(base_dir)
    required = ("scene_path", "camera_set_path", "mask_dir")
    missing = [k for k in required if not raw.get(k)]
    if missing:
        raise ConfigError(f"config is missing {missing}")
    known = {f.name for f in dataclasses.fields(PipelineConfig)} - {"source", "default_material"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    def path(v):
        return None if v is None else (base / Path(v)).resolve()

    seg = _section(SegmentationConfig, raw.get("segmentation"), "segmentation")
    if not 0.0 < seg.tau_T < 1.0:
        raise ConfigError(f"segmentation.tau_T must lie in (0, 1), got {seg.tau_T}")
    if seg.tau_d <= 0:
        raise ConfigError(f"segmentation.tau_d must be > 0, got {seg.tau_d}")

    sim = _section(SimConfig, raw.get("sim"), "sim")
    if sim.dt <= 0:
        raise ConfigError(f"sim.dt must be > 0, got {sim.dt}")
    if sim.dx is not None and sim.dx <= 0:
        raise ConfigError(f"sim.dx must be > 0, got {sim.dx}")
    if sim.steps < 0 or sim.frame_stride < 1:
        raise ConfigError("sim.steps must be >= 0 and sim.frame_stride >= 1")
    if len(sim.gravity) != 3:
        raise ConfigError("sim.gravity needs 3 components")
    sim.grid()  # validates resolution

    clamp = _section(ClampConfig, raw.get("clamp"), "clamp")
    if clamp.mode not in MODES:
        raise ConfigError(f"clamp.mode must be one of {MODES}, got {clamp.mode!r}")
    clamp.params()

    materials, default = {}, None
    for key, m in (raw.get("materials") or {}).items():
        if str(key) == "default":
            default = _material(m, "default")
            continue
        try:
            oid = int(key)
        except ValueError:
            raise ConfigError(f"material key {key!r} is not an object id") from None
        materials[oid] = _material(m, oid)

    render = _section(RenderConfig, raw.get("render"), "render")
    ev = _section(EvalConfig, raw.get("eval"), "eval")
    ev = dataclasses.replace(ev, gt_dir=path(ev.gt_dir))
    if ev.boundary_radius is not None and ev.boundary_radius < 1:
        raise ConfigError("eval.boundary_radius must be >= 1")
    backend = raw.get("backend")
    if backend not in (None, "python", "cython"):
        raise ConfigError(f"backend must be 'python' or 'cython', got {backend!r}")

    return PipelineConfig(
        scene_path=path(raw["scene_path"]),
        camera_set_path=path(raw["camera_set_path"]),
        mask_dir=path(raw["mask_dir"]),
        output_dir=path(raw.get("output_dir", "out")),
        segmentation=seg,
        materials=materials,
        default_material=default,
        sim=sim,
        clamp=clamp,
        render=render,
        eval=ev,
        seed=int(raw.get("seed", 0)),
        backend=backend,
        source=raw,
    )


def load_config(path, overrides=()) -> PipelineConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw = apply_overrides(raw, overrides)
    return config_from_dict(raw, path.parent)
