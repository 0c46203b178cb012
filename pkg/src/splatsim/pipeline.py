"""Stage drivers: segment -> simulate -> render -> eval.

Every stage reads the config, writes into ``output_dir`` and records itself
in ``manifest.json`` (config hash, wall time, output paths). Outputs are
deterministic, so re-running a stage on the same inputs rewrites identical
bytes; only the manifest timings change.

Layout of ``output_dir``::

    segment/scene_segmented.ply   scene with object_id per Gaussian
    segment/object_ids.npy        Gaussian index -> object id
    segment/depth/<view>.sdpt     surface depth per input view
    simulate/trajectory/frame_XXXXX.npz
    simulate/checkpoint.npz
    render/<camera>_XXXXX.png
    eval/metrics.csv
    manifest.json
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import mpm
from .config import PipelineConfig
from .errors import ConfigError, DataError, FormatError, SimulationError
from .kinematics import update_gaussians
from .render import render, render_binary_mask, save_depth_map, save_png
from .scene_io import load_cameras, load_gaussian_ply, load_id_masks, mask_filename, read_id_image, \
    save_gaussian_ply
from .segmentation import default_boundary_radius, mbiou, miou, segment

log = logging.getLogger("splatsim.pipeline")

STAGES = ("segment", "simulate", "render", "eval")
FRAME_DIGITS = 5


class StageError(Exception):
    """Wraps an error with the stage it aborted."""

    def __init__(self, stage: str, error: Exception):
        super().__init__(f"[{stage}] {error}")
        self.stage = stage
        self.error = error


def log_event(stage: str, **fields) -> None:
    """One structured ``key=value`` line per event."""
    parts = [f"stage={stage}"]
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        parts.append(f"{k}={v}")
    log.info(" ".join(parts))


@dataclasses.dataclass
class RunManifest:
    config_hash: str
    timings: dict = dataclasses.field(default_factory=dict)
    outputs: dict = dataclasses.field(default_factory=dict)
    frame_count: int | None = None
    metrics: list = dataclasses.field(default_factory=list)

    @classmethod
    def load(cls, path: Path, config_hash: str) -> RunManifest:
        if path.is_file():
            data = json.loads(path.read_text())
            if data.get("config_hash") == config_hash:
                return cls(**data)
        return cls(config_hash)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, default=str))

    def record(self, stage: str, seconds: float, outputs: list) -> None:
        self.timings[stage] = round(seconds, 4)
        self.outputs[stage] = [str(p) for p in outputs]


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.backend = config.backend

    # paths
    @property
    def segmented_scene_path(self) -> Path:
        return self.out / "segment" / "scene_segmented.ply"

    @property
    def trajectory_dir(self) -> Path:
        return self.out / "simulate" / "trajectory"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "simulate" / "checkpoint.npz"

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def frame_path(self, frame: int) -> Path:
        return self.trajectory_dir / f"frame_{frame:0{FRAME_DIGITS}d}.npz"

    def _run(self, stage, fn, *args, **kwargs):
        self.out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        log_event(stage, event="start")
        try:
            outputs, extra = fn(*args, **kwargs)
        except (FormatError, DataError, ConfigError, OSError) as exc:
            log_event(stage, event="error", error=type(exc).__name__)
            raise StageError(stage, exc) from exc
        wall = time.perf_counter() - t0
        manifest = RunManifest.load(self.manifest_path, self.config.hash)
        manifest.record(stage, wall, outputs)
        for key, value in extra.items():
            setattr(manifest, key, value)
        manifest.save(self.manifest_path)
        log_event(stage, event="done", wall=wall, outputs=len(outputs))
        return outputs

    def _cameras(self, names=None):
        cams = load_cameras(self.config.camera_set_path)
        if names is None:
            return cams
        by_name = {c.name: c for c in cams}
        unknown = [n for n in names if n not in by_name]
        if unknown:
            raise ConfigError(f"unknown camera names {unknown}")
        return [by_name[n] for n in names]

    # --- segment -------------------------------------------------------
    def segment(self):
        return self._run("segment", self._segment)

    def _segment(self):
        cfg = self.config
        scene = load_gaussian_ply(cfg.scene_path)
        cams = self._cameras()
        masks = load_id_masks(cfg.mask_dir, cams)
        ids, votes, depth_maps = segment(scene, cams, masks, cfg.segmentation.tau_T,
                                         cfg.segmentation.tau_d, backend=self.backend)
        seg_dir = self.out / "segment"
        (seg_dir / "depth").mkdir(parents=True, exist_ok=True)
        outputs = [self.segmented_scene_path, seg_dir / "object_ids.npy"]
        save_gaussian_ply(scene.replace(object_ids=ids), outputs[0])
        np.save(outputs[1], ids)
        for cam, dm in zip(cams, depth_maps):
            p = seg_dir / "depth" / f"{cam.name}.sdpt"
            save_depth_map(p, dm)
            outputs.append(p)
        counts = {int(k): int(v) for k, v in zip(*np.unique(ids, return_counts=True))}
        log_event("segment", gaussians=len(ids), ids=json.dumps(counts, separators=(",", ":")))
        return outputs, {}

    # --- simulate ------------------------------------------------------
    def load_segmented(self):
        if not self.segmented_scene_path.is_file():
            raise FormatError(f"segmented scene {self.segmented_scene_path} not found; run segment first")
        return load_gaussian_ply(self.segmented_scene_path)

    def simulate(self, resume: bool = False):
        return self._run("simulate", self._simulate, resume)

    def _simulate(self, resume):
        cfg = self.config
        sim = cfg.sim
        self.trajectory_dir.mkdir(parents=True, exist_ok=True)
        if resume and self.checkpoint_path.is_file():
            state = mpm.load_checkpoint(self.checkpoint_path)
            log_event("simulate", event="resume", step=state.step_count)
        else:
            scene = self.load_segmented()
            present = np.unique(scene.object_ids)
            if not sim.include_background:
                present = present[present != 0]
            materials = cfg.material_table(present)
            state = mpm.init_sim(scene, materials, sim.grid(), sim.dt, sim.gravity,
                                 include_background=sim.include_background)
            for old in self.trajectory_dir.glob("frame_*.npz"):
                old.unlink()
            mpm.save_frame(state, self.frame_path(0))
            mpm.save_checkpoint(state, self.checkpoint_path)

        t0 = time.perf_counter()
        while state.step_count < sim.steps:
            n = min(sim.frame_stride - state.step_count % sim.frame_stride, sim.steps - state.step_count)
            try:
                mpm.simulate(state, n, backend=self.backend)
                mpm.check_inside(state)
            except SimulationError as exc:
                log_event("simulate", event="failed", step=state.step_count, error=str(exc))
                raise
            if state.step_count % sim.frame_stride == 0:
                frame = state.step_count // sim.frame_stride
                mpm.save_frame(state, self.frame_path(frame))
                mpm.save_checkpoint(state, self.checkpoint_path)
                log_event("simulate", step=state.step_count, frame=frame,
                          wall=time.perf_counter() - t0)
        mpm.save_checkpoint(state, self.checkpoint_path)
        frames = sorted(self.trajectory_dir.glob("frame_*.npz"))
        return frames + [self.checkpoint_path], {"frame_count": len(frames)}

    # --- render --------------------------------------------------------
    def frames(self) -> list[Path]:
        frames = sorted(self.trajectory_dir.glob("frame_*.npz"))
        if not frames:
            raise FormatError(f"no trajectory frames in {self.trajectory_dir}; run simulate first")
        return frames

    def posed_scene(self, scene, frame_file):
        fr = mpm.load_frame(frame_file)
        c = self.config.clamp
        return update_gaussians(scene, fr["gaussian_index"], fr["x"], fr["F"], c.params(),
                                mode=c.mode, orthonormalize=c.orthonormalize)

    def render(self):
        return self._run("render", self._render)

    def _render(self):
        cfg = self.config
        scene = self.load_segmented()
        cams = self._cameras(cfg.render.cameras)
        out_dir = self.out / "render"
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = []
        for frame_file in self.frames():
            frame = int(frame_file.stem.split("_")[1])
            posed = self.posed_scene(scene, frame_file)
            for cam in cams:
                img = render(posed, cam, cfg.segmentation.tau_T, cfg.render.background,
                             backend=self.backend).image
                if not np.isfinite(img).all():
                    raise DataError(f"non-finite pixels in frame {frame}, camera {cam.name}")
                p = out_dir / f"{cam.name}_{frame:0{FRAME_DIGITS}d}.png"
                save_png(p, img)
                outputs.append(p)
            log_event("render", frame=frame, cameras=len(cams))
        return outputs, {}

    # --- eval ----------------------------------------------------------
    def evaluate(self):
        return self._run("eval", self._evaluate)

    def _evaluate(self):
        cfg = self.config
        gt_dir = cfg.eval.gt_dir
        if gt_dir is None or not Path(gt_dir).is_dir():
            raise ConfigError(f"eval.gt_dir {gt_dir} is not a directory")
        scene = self.load_segmented()
        cams = self._cameras(cfg.eval.cameras)
        object_ids = sorted(int(p.name) for p in Path(gt_dir).iterdir() if p.is_dir() and p.name.isdigit())
        if not object_ids:
            raise DataError(f"no per-object ground truth folders in {gt_dir}")
        rows = []
        for oid in object_ids:
            sub = scene.subset(scene.object_ids == oid)
            preds, gts = [], []
            for cam in cams:
                gt_path = Path(gt_dir) / str(oid) / mask_filename(cam)
                if not gt_path.is_file():
                    raise FormatError(f"missing ground truth {gt_path}")
                gt = read_id_image(gt_path) > 0
                pred = render_binary_mask(sub, cam, cfg.segmentation.tau_T, backend=self.backend).ids > 0
                if pred.shape != gt.shape:
                    raise DataError(f"{gt_path}: ground truth is {gt.shape}, render is {pred.shape}")
                preds.append(pred)
                gts.append(gt)
            radius = cfg.eval.boundary_radius or default_boundary_radius(*gts[0].shape)
            rows.append({"object_id": oid, "miou": miou(np.stack(preds), np.stack(gts)),
                         "mbiou": mbiou(np.stack(preds), np.stack(gts), radius)})
        rows.append({"object_id": "mean", "miou": float(np.mean([r["miou"] for r in rows])),
                     "mbiou": float(np.mean([r["mbiou"] for r in rows]))})
        eval_dir = self.out / "eval"
        eval_dir.mkdir(parents=True, exist_ok=True)
        path = eval_dir / "metrics.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["object_id", "miou", "mbiou"], lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({**r, "miou": f"{r['miou']:.6f}", "mbiou": f"{r['mbiou']:.6f}"})
        return [path], {"metrics": rows}

    def run_all(self):
        self.segment()
        self.simulate()
        self.render()
        if self.config.eval.gt_dir is not None:
            self.evaluate()


def format_metrics(rows) -> str:
    lines = [f"{'object':>8}  {'mIoU':>8}  {'mBIoU':>8}"]
    for r in rows:
        lines.append(f"{str(r['object_id']):>8}  {r['miou']:8.4f}  {r['mbiou']:8.4f}")
    return "\n".join(lines)
