"""Depth-sorted alpha-blended splat rasterization.

One compositing pass yields the RGB image, the final transmittance (for
object masks) and the surface depth: the camera-space depth of the first
splat at which a pixel's transmittance falls below ``tau_T``.

Splats are sorted globally by camera-space center depth (ties by input
index). Per pixel, alpha = opacity * exp(-0.5 dᵀ cov2d⁻¹ d) clipped to 0.99;
compositing stops once transmittance would drop below 1e-4. Contributions
below ``MIN_ALPHA`` are skipped, and each splat's pixel box is exactly the
region where its alpha can reach ``MIN_ALPHA``, so tile binning never
changes a result.
"""
from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .errors import FormatError
from .scene_io import Camera, GaussianScene, IdMask

NEAR_PLANE = 0.01
LOWPASS = 0.3
ALPHA_MAX = 0.99
T_STOP = 1e-4
MIN_ALPHA = 1e-6
DEPTH_SENTINEL = 0.0
DEPTH_MAGIC = b"SDPT"

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclasses.dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclasses.dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel surface depth; ``DEPTH_SENTINEL`` (0) marks pixels with no surface."""

    depth: np.ndarray
    sentinel: float = DEPTH_SENTINEL

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.depth != self.sentinel


@dataclasses.dataclass(frozen=True, eq=False)
class Projection:
    """Batch screen-space splats; rows with ``visible == False`` are culled."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    opacities: np.ndarray
    bbox: np.ndarray
    visible: np.ndarray


@dataclasses.dataclass(frozen=True, eq=False)
class RenderResult:
    image: np.ndarray
    transmittance: np.ndarray
    depth: DepthMap


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Degree-3 real spherical harmonics color, shifted by 0.5 and clamped at 0."""
    x, y, z = (dirs[:, i : i + 1] for i in range(3))
    xx, yy, zz = x * x, y * y, z * z
    c = SH_C0 * sh[:, 0]
    c = c - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    c = (c + SH_C2[0] * x * y * sh[:, 4] + SH_C2[1] * y * z * sh[:, 5]
         + SH_C2[2] * (2 * zz - xx - yy) * sh[:, 6] + SH_C2[3] * x * z * sh[:, 7]
         + SH_C2[4] * (xx - yy) * sh[:, 8])
    c = (c + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9] + SH_C3[1] * x * y * z * sh[:, 10]
         + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
         + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
         + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
         + SH_C3[5] * z * (xx - yy) * sh[:, 14] + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15])
    return np.maximum(c + 0.5, 0.0)


def project_covariance(cov3d, pc, camera: Camera):
    """EWA first-order projection of world covariances to pixel space, plus dilation."""
    z = pc[:, 2]
    lim_l = 1.3 * camera.cx / camera.fx
    lim_r = 1.3 * (camera.width - camera.cx) / camera.fx
    lim_t = 1.3 * camera.cy / camera.fy
    lim_b = 1.3 * (camera.height - camera.cy) / camera.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.clip(pc[:, 0] / z, -lim_l, lim_r) * z
        ty = np.clip(pc[:, 1] / z, -lim_t, lim_b) * z
        J = np.zeros((len(z), 2, 3))
        J[:, 0, 0] = camera.fx / z
        J[:, 0, 2] = -camera.fx * tx / (z * z)
        J[:, 1, 1] = camera.fy / z
        J[:, 1, 2] = -camera.fy * ty / (z * z)
    T = J @ camera.rotation
    cov2d = T @ cov3d @ np.swapaxes(T, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    return cov2d


def project_scene(scene: GaussianScene, camera: Camera, near: float = NEAR_PLANE) -> Projection:
    n = len(scene)
    pc = camera.to_camera(scene.means)
    z = pc[:, 2]
    in_front = z > near
    A = scene.linear_transforms()
    cov3d = A @ np.swapaxes(A, -1, -2)
    cov2d = np.tile(np.eye(2), (n, 1, 1))
    if in_front.any():
        cov2d[in_front] = project_covariance(cov3d[in_front], pc[in_front], camera)
    means2d = np.zeros((n, 2))
    means2d[in_front, 0] = camera.fx * pc[in_front, 0] / z[in_front] + camera.cx
    means2d[in_front, 1] = camera.fy * pc[in_front, 1] / z[in_front] + camera.cy

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], -1)
    opac = scene.opacities
    # footprint: alpha >= MIN_ALPHA  <=>  dᵀ cov⁻¹ d <= 2 ln(opacity / MIN_ALPHA)
    with np.errstate(divide="ignore"):
        q = 2.0 * np.log(np.maximum(opac, 1e-300) / MIN_ALPHA)
    ok = in_front & (det > 0) & (q > 0) & np.isfinite(means2d).all(1)
    q = np.where(ok, q, 0.0)
    rx = np.sqrt(q * np.maximum(a, 0))
    ry = np.sqrt(q * np.maximum(c, 0))
    u, v = means2d[:, 0], means2d[:, 1]
    bbox = np.zeros((n, 4), dtype=np.int64)
    if ok.any():
        bbox[ok, 0] = np.clip(np.ceil(u[ok] - rx[ok] - 0.5), 0, camera.width)
        bbox[ok, 1] = np.clip(np.floor(u[ok] + rx[ok] - 0.5) + 1, 0, camera.width)
        bbox[ok, 2] = np.clip(np.ceil(v[ok] - ry[ok] - 0.5), 0, camera.height)
        bbox[ok, 3] = np.clip(np.floor(v[ok] + ry[ok] - 0.5) + 1, 0, camera.height)
    visible = ok & (bbox[:, 1] > bbox[:, 0]) & (bbox[:, 3] > bbox[:, 2])
    bbox[~visible] = 0
    return Projection(means2d, cov2d, conics, z, opac, bbox, visible)


def project_gaussian(scene: GaussianScene, index: int, camera: Camera,
                     linear_transform: np.ndarray | None = None) -> Splat2D | None:
    """Screen-space splat of one Gaussian, or None when culled."""
    g = scene.subset([index])
    if linear_transform is not None:
        g = g.replace(transforms=np.asarray(linear_transform, dtype=np.float64)[None])
    proj = project_scene(g, camera)
    if not proj.visible[0]:
        return None
    color = eval_sh(g.sh, _view_dirs(g.means, camera))[0]
    return Splat2D(proj.means2d[0], proj.cov2d[0], float(proj.depths[0]), color,
                   float(proj.opacities[0]))


def _view_dirs(means, camera):
    d = means - camera.center
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.where(n > 0, n, 1.0)


def render(scene: GaussianScene, camera: Camera, tau_T: float = 0.5,
           background=(0.0, 0.0, 0.0), backend=None) -> RenderResult:
    """Composite ``scene`` into ``camera``: image, transmittance and surface depth."""
    if not 0.0 < tau_T < 1.0:
        raise ValueError(f"tau_T must lie in (0, 1), got {tau_T}")
    proj = project_scene(scene, camera)
    idx = np.flatnonzero(proj.visible)
    # stable sort: ties in depth keep input order
    order = idx[np.argsort(proj.depths[idx], kind="stable")]
    colors = np.zeros((len(scene), 3))
    if idx.size:
        colors[idx] = eval_sh(scene.sh[idx], _view_dirs(scene.means[idx], camera))
    image, trans, depth = kernels.rasterize(
        proj.means2d, proj.conics, proj.opacities, colors, proj.depths, proj.bbox, order,
        camera.width, camera.height, background, tau_T, ALPHA_MAX, T_STOP, MIN_ALPHA,
        backend=backend,
    )
    depth = np.where(np.isnan(depth), DEPTH_SENTINEL, depth)
    return RenderResult(image, trans, DepthMap(depth))


def render_rgb(scene, camera, background=(0.0, 0.0, 0.0), backend=None) -> np.ndarray:
    return render(scene, camera, background=background, backend=backend).image


def render_surface_depth(scene, camera, tau_T: float = 0.5, backend=None) -> DepthMap:
    return render(scene, camera, tau_T=tau_T, backend=backend).depth


def render_binary_mask(scene_subset, camera, tau_T: float = 0.5, backend=None) -> IdMask:
    """1 where the subset's accumulated opacity exceeds 1 - tau_T."""
    res = render(scene_subset, camera, tau_T=tau_T, backend=backend)
    return IdMask((1.0 - res.transmittance > 1.0 - tau_T).astype(np.int64))


# --- raster files ----------------------------------------------------------


def save_png(path, image: np.ndarray) -> None:
    img = np.clip(np.nan_to_num(image), 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def save_depth_map(path, depth: DepthMap) -> None:
    """16-byte header (magic, width, height, sentinel) + float32 rows, little-endian."""
    header = DEPTH_MAGIC + struct.pack("<IIf", depth.width, depth.height, depth.sentinel)
    Path(path).write_bytes(header + depth.depth.astype("<f4").tobytes())


def load_depth_map(path) -> DepthMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: not a depth raster")
    w, h, sentinel = struct.unpack("<IIf", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != w * h:
        raise FormatError(f"{path}: expected {w * h} depth values, found {data.size}")
    return DepthMap(data.reshape(h, w).astype(np.float64), float(sentinel))
