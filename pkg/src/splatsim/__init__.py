"""Physics-driven animation of segmented Gaussian splat scenes.

Stages: lift multi-view instance masks onto Gaussians (``segmentation``),
simulate each object with MLS-MPM (``mpm``), pose the Gaussians from the
particle deformation (``kinematics``) and render them (``render``).
"""
from .errors import ConfigError, DataError, FormatError, NumericalError, SimulationError, SplatSimError
from .kernels import BACKEND, available_backends
from .kinematics import ClampParams, update_gaussians
from .mpm import GridConfig, Material, init_sim, simulate, step
from .render import render, render_binary_mask, render_rgb, render_surface_depth
from .scene_io import Camera, GaussianScene, IdMask, load_cameras, load_gaussian_ply, load_id_masks, \
    save_gaussian_ply
from .segmentation import mbiou, miou, segment, vote_final_ids

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Camera", "ClampParams", "ConfigError", "DataError", "FormatError", "GaussianScene",
    "GridConfig", "IdMask", "Material", "NumericalError", "SimulationError", "SplatSimError",
    "available_backends", "init_sim", "load_cameras", "load_gaussian_ply", "load_id_masks", "mbiou",
    "miou", "render", "render_binary_mask", "render_rgb", "render_surface_depth",
    "save_gaussian_ply", "segment", "simulate", "step", "update_gaussians", "vote_final_ids",
]
