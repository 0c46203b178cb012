"""Synthetic scenes with analytic ground truth.

Objects are spherical shells of small opaque Gaussians (trained splat scenes
concentrate Gaussians on surfaces), so instance masks and per-object
silhouettes follow from exact ray/sphere intersection.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .render import rgb_to_sh_dc
from .scene_io import (SH_COEFFS, Camera, GaussianScene, save_cameras, save_gaussian_ply,
                       write_id_image)

DEFAULT_CENTERS = ((-0.55, -0.55, 0.0), (0.55, 0.55, 0.0))
DEFAULT_COLORS = ((0.9, 0.25, 0.2), (0.2, 0.4, 0.9))
BACKGROUND_COUNT = 64
BACKGROUND_LIFT = 0.9


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)


def shell_gaussians(n, center, radius, color, object_id, rng, sigma=None, opacity=0.995):
    dirs = fibonacci_sphere(n)
    spacing = np.sqrt(4 * np.pi * radius**2 / n)
    sigma = 0.7 * spacing if sigma is None else sigma
    # many splats overlap along grazing rays, so the opaque limb of a dense shell
    # reaches ~2.5 sigma past the centers; inset them so the silhouette matches `radius`
    r = radius - 2.5 * sigma + rng.uniform(-0.15, 0.15, n) * sigma
    means = np.asarray(center) + dirs * r[:, None]
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0] = rgb_to_sh_dc(color)
    return dict(
        means=means,
        log_scales=np.full((n, 3), np.log(sigma)),
        rotations=quats,
        opacity_logits=np.full(n, np.log(opacity / (1 - opacity))),
        sh=sh,
        object_ids=np.full(n, object_id),
    )


def background_disc(n, center, radius, color, rng, sigma=0.03, opacity=0.95):
    """Flat horizontal disc of Gaussians with id 0 (static scenery)."""
    r = radius * np.sqrt((np.arange(n) + 0.5) / n)
    theta = np.pi * (1.0 + 5.0**0.5) * np.arange(n)
    means = np.asarray(center) + np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)], -1)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0] = rgb_to_sh_dc(color)
    return dict(
        means=means,
        log_scales=np.log(np.tile([sigma, sigma, 0.3 * sigma], (n, 1))),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, np.log(opacity / (1 - opacity))),
        sh=sh,
        object_ids=np.zeros(n, dtype=np.int64),
    )


def ball_scene(n_per_ball=2500, centers=DEFAULT_CENTERS, radius=0.5, colors=DEFAULT_COLORS,
               seed=0, n_background=BACKGROUND_COUNT) -> GaussianScene:
    """Spherical Gaussian shells with ground-truth ids 1..K over a small id-0 disc.

    The disc floats above the balls, off every ring camera's line of sight to them,
    so it never changes the analytic masks.
    """
    rng = np.random.default_rng(seed)
    parts = [shell_gaussians(n_per_ball, c, radius, col, k + 1, rng)
             for k, (c, col) in enumerate(zip(centers, colors))]
    if n_background:
        top = np.mean(centers, axis=0) + (0.0, 0.0, max(c[2] for c in centers) + radius + BACKGROUND_LIFT)
        parts.append(background_disc(n_background, top, 0.25, (0.6, 0.6, 0.55), rng))
    return GaussianScene(**{key: np.concatenate([p[key] for p in parts]) for key in parts[0]})


def ring_cameras(n_views=8, distance=4.0, target=(0.0, 0.0, 0.0), width=256, height=256,
                 focal=280.0, elevation_deg=20.0) -> list[Camera]:
    """Views on a ring around ``target``, alternating above and below the equator."""
    cams = []
    target = np.asarray(target, dtype=np.float64)
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        el = np.deg2rad(elevation_deg if k % 2 == 0 else -elevation_deg)
        eye = target + distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        name = f"view_{k:03d}"
        cams.append(Camera.look_at(name, eye, target, (0, 0, 1), focal, focal, width, height,
                                   mask=f"{name}.png"))
    return cams


def _pixel_rays(camera: Camera):
    j, i = np.mgrid[0 : camera.height, 0 : camera.width]
    d_cam = np.stack([(i + 0.5 - camera.cx) / camera.fx, (j + 0.5 - camera.cy) / camera.fy,
                      np.ones(i.shape)], -1)
    d = d_cam @ camera.rotation  # camera -> world (Rᵀ d)
    return camera.center, d / np.linalg.norm(d, axis=-1, keepdims=True)


def sphere_hit_distance(camera: Camera, center, radius) -> np.ndarray:
    """Distance along each pixel ray to the sphere, inf where missed."""
    o, d = _pixel_rays(camera)
    oc = o - np.asarray(center)
    b = d @ oc
    disc = b * b - (oc @ oc - radius * radius)
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def analytic_id_mask(camera, centers=DEFAULT_CENTERS, radius=0.5) -> np.ndarray:
    """Visible object id per pixel (nearest sphere hit), 0 = background."""
    t = np.stack([sphere_hit_distance(camera, c, radius) for c in centers])
    nearest = np.argmin(t, axis=0)
    return np.where(np.isfinite(t.min(axis=0)), nearest + 1, 0)


def analytic_silhouette(camera, center, radius=0.5) -> np.ndarray:
    return np.isfinite(sphere_hit_distance(camera, center, radius))


def write_dataset(out_dir, n_per_ball=2500, n_views=8, centers=DEFAULT_CENTERS, radius=0.5,
                  seed=0, width=256, height=256) -> Path:
    """Write scene.ply (no ids), cameras.json, masks/, gt/<id>/ and config.yaml.

    Returns the config path.
    """
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    scene = ball_scene(n_per_ball, centers, radius, seed=seed)
    save_gaussian_ply(scene.replace(object_ids=None), out / "scene.ply")
    cams = ring_cameras(n_views, target=np.mean(centers, axis=0), width=width, height=height,
                        focal=280.0 * width / 256)
    save_cameras(cams, out / "cameras.json")
    for cam in cams:
        write_id_image(out / "masks" / cam.mask, analytic_id_mask(cam, centers, radius))
        for k, c in enumerate(centers):
            gt_dir = out / "gt" / str(k + 1)
            gt_dir.mkdir(parents=True, exist_ok=True)
            write_id_image(gt_dir / cam.mask, analytic_silhouette(cam, c, radius).astype(np.uint16))
    velocities = ((2.0, 0.0, 0.0), (1.0, -1.0, 0.0))
    config = {
        "scene_path": "scene.ply",
        "camera_set_path": "cameras.json",
        "mask_dir": "masks",
        "output_dir": "out",
        "segmentation": {"tau_T": 0.5, "tau_d": 0.03},
        "materials": {
            k + 1: {
                "density": 1000.0,
                "youngs_modulus": 1.0e7,
                "poisson_ratio": 0.2,
                "model": "fixed_corotated",
                "initial_velocity": list(velocities[k % 2]),
            }
            for k in range(len(centers))
        },
        "sim": {"dt": 2.0e-5, "grid_resolution": 64, "dx": 3.0 / 64, "gravity": [0.0, 0.0, 0.0],
                "steps": 2000, "frame_stride": 400},
        "clamp": {"lambda_R": 1.2, "lambda_S": 0.8},
        "render": {"cameras": [cams[0].name]},
        "eval": {"gt_dir": "gt"},
    }
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path
