"""Gaussian scenes, cameras and instance masks, and their on-disk formats.

Scales and opacities are kept pre-activation (log-scale, logit-opacity) as in
the usual splat PLY layout; use :attr:`GaussianScene.scales` and
:attr:`GaussianScene.opacities` for activated values.

Camera convention: x right, y down, z forward; pixel ``(i, j)`` is
(column, row) and its center sits at ``(i + 0.5, j + 0.5)``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

SH_COEFFS = 16  # degree 3
N_REST = 3 * (SH_COEFFS - 1)

PLY_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(N_REST)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
OBJECT_ID_PROPERTY = "object_id"


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (N,3,3) from (w, x, y, z) quaternions (N,4)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions for rotation matrices (N,3,3), w >= 0."""
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianScene:
    """Ordered collection of Gaussian primitives.

    ``sh`` is (N, 16, 3): coefficient index first, RGB last. ``transforms``
    optionally overrides the per-Gaussian linear factor ``R diag(s)`` used
    for rendering (posed scenes after simulation).
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    object_ids: np.ndarray | None = None
    transforms: np.ndarray | None = None

    def __post_init__(self):
        n = np.asarray(self.means).reshape(-1, 3).shape[0]
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("means", _frozen(np.reshape(self.means, (n, 3))))
        set_("log_scales", _frozen(np.reshape(self.log_scales, (n, 3))))
        set_("rotations", _frozen(np.reshape(self.rotations, (n, 4))))
        set_("opacity_logits", _frozen(np.reshape(self.opacity_logits, (n,))))
        set_("sh", _frozen(np.reshape(self.sh, (n, SH_COEFFS, 3))))
        if self.object_ids is not None:
            ids = np.reshape(self.object_ids, (n,))
            if (ids < 0).any():
                raise DataError("object ids must be non-negative")
            set_("object_ids", _frozen(ids, np.int64))
        if self.transforms is not None:
            set_("transforms", _frozen(np.reshape(self.transforms, (n, 3, 3))))

    def __len__(self):
        return self.means.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.rotations)

    def linear_transforms(self) -> np.ndarray:
        """Per-Gaussian A with world covariance A Aᵀ."""
        if self.transforms is not None:
            return self.transforms
        return self.rotation_matrices() * self.scales[:, None, :]

    def covariances(self) -> np.ndarray:
        A = self.linear_transforms()
        return A @ np.swapaxes(A, -1, -2)

    def replace(self, **changes) -> GaussianScene:
        return dataclasses.replace(self, **changes)

    def subset(self, index) -> GaussianScene:
        """Gaussians selected by a boolean mask or index array, order preserved."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return GaussianScene(
            means=self.means[index],
            log_scales=self.log_scales[index],
            rotations=self.rotations[index],
            opacity_logits=self.opacity_logits[index],
            sh=self.sh[index],
            object_ids=None if self.object_ids is None else self.object_ids[index],
            transforms=None if self.transforms is None else self.transforms[index],
        )

    @classmethod
    def empty(cls) -> GaussianScene:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, SH_COEFFS, 3)))


@dataclasses.dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with a rigid world-to-camera transform."""

    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    mask: str | None = None

    def __post_init__(self):
        E = _frozen(self.world_to_camera)
        if E.shape != (4, 4):
            raise FormatError(f"camera {self.name!r}: world_to_camera must be 4x4")
        object.__setattr__(self, "world_to_camera", E)
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"camera {self.name!r}: image size must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates, -Rᵀt."""
        return -self.rotation.T @ self.translation

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (N,2) and camera-space depth z_c (N,) of world points."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], -1)
        return uv, z

    def validate(self, tol: float = 1e-4):
        R = self.rotation
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > tol or np.linalg.det(R) <= 0:
            raise DataError(
                f"camera {self.name!r}: rotation block is not a proper rotation "
                f"(orthonormality error {err:.2e}, det {np.linalg.det(R):.6f})"
            )
        if not np.allclose(self.world_to_camera[3], [0, 0, 0, 1]):
            raise DataError(f"camera {self.name!r}: last row of world_to_camera must be 0 0 0 1")

    @classmethod
    def look_at(cls, name, eye, target, up, fx, fy, width, height, cx=None, cy=None, mask=None):
        """Camera at ``eye`` looking at ``target``; ``up`` maps to -y in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ eye
        return cls(name, float(fx), float(fy), width / 2.0 if cx is None else float(cx),
                   height / 2.0 if cy is None else float(cy), int(width), int(height), E, mask)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_to_camera": self.world_to_camera.tolist(),
            "mask": self.mask,
        }


@dataclasses.dataclass(frozen=True, eq=False)
class IdMask:
    """Per-view raster of object ids, 0 = background."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise FormatError("id mask must be a single-channel 2-D raster")
        if (ids < 0).any():
            raise DataError("id mask values must be non-negative")
        object.__setattr__(self, "ids", _frozen(ids, np.int64))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]


# --- PLY -------------------------------------------------------------------


def load_gaussian_ply(path) -> GaussianScene:
    path = Path(path)
    ply = PlyData.read(str(path))
    if ply.text or ply.byte_order not in ("<", "="):
        raise FormatError(f"{path}: expected binary_little_endian PLY")
    try:
        vertex = ply["vertex"]
    except KeyError:
        raise FormatError(f"{path}: no vertex element") from None
    names = {p.name for p in vertex.properties}
    for prop in PLY_PROPERTIES:
        if prop not in names and prop not in ("nx", "ny", "nz"):
            raise FormatError(f"{path}: missing required property {prop!r}")
    data = vertex.data
    n = len(data)

    def cols(props):
        return np.stack([np.asarray(data[p], dtype=np.float64) for p in props], -1).reshape(n, len(props))

    means = cols(["x", "y", "z"])
    dc = cols([f"f_dc_{i}" for i in range(3)])
    rest = cols([f"f_rest_{i}" for i in range(N_REST)])
    opacity = cols(["opacity"])[:, 0]
    log_scales = cols([f"scale_{i}" for i in range(3)])
    quats = cols([f"rot_{i}" for i in range(4)])

    for label, arr in (("position", means), ("f_dc", dc), ("f_rest", rest),
                       ("opacity", opacity), ("scale", log_scales), ("rotation", quats)):
        bad = ~np.isfinite(arr).all(axis=tuple(range(1, arr.ndim)))
        if bad.any():
            raise DataError(f"{path}: non-finite {label} at vertex {int(np.flatnonzero(bad)[0])}")

    norms = np.linalg.norm(quats, axis=1)
    if (norms == 0).any():
        raise DataError(f"{path}: zero quaternion at vertex {int(np.flatnonzero(norms == 0)[0])}")
    off = np.abs(norms - 1.0) > 1e-6
    # normalized values are kept float32-representable so save/load round-trips exactly
    quats[off] = (quats[off] / norms[off, None]).astype(np.float32)

    sh = np.empty((n, SH_COEFFS, 3))
    sh[:, 0, :] = dc
    sh[:, 1:, :] = rest.reshape(n, 3, SH_COEFFS - 1).transpose(0, 2, 1)
    ids = None
    if OBJECT_ID_PROPERTY in names:
        ids = np.asarray(data[OBJECT_ID_PROPERTY], dtype=np.int64)
    return GaussianScene(means, log_scales, quats, opacity, sh, ids)


def save_gaussian_ply(scene: GaussianScene, path) -> None:
    path = Path(path)
    n = len(scene)
    fields = [(p, "f4") for p in PLY_PROPERTIES]
    if scene.object_ids is not None:
        fields.append((OBJECT_ID_PROPERTY, "i4"))
    arr = np.zeros(n, dtype=fields)
    for i, p in enumerate("xyz"):
        arr[p] = scene.means[:, i]
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, N_REST)
    for i in range(3):
        arr[f"f_dc_{i}"] = scene.sh[:, 0, i]
        arr[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(N_REST):
        arr[f"f_rest_{i}"] = rest[:, i]
    arr["opacity"] = scene.opacity_logits
    for i in range(4):
        arr[f"rot_{i}"] = scene.rotations[:, i]
    if scene.object_ids is not None:
        arr[OBJECT_ID_PROPERTY] = scene.object_ids
    el = PlyElement.describe(arr, "vertex")
    try:
        PlyData([el], text=False, byte_order="<").write(str(path))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write Gaussian PLY: {exc.strerror}", str(path)) from exc


# --- cameras ---------------------------------------------------------------


def load_cameras(path) -> list[Camera]:
    """Read a camera-set JSON document ``{"cameras": [...]}``; order = view index."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    records = doc["cameras"] if isinstance(doc, dict) else doc
    cams = []
    seen = set()
    for i, rec in enumerate(records):
        name = str(rec.get("name", f"view_{i:03d}"))
        if name in seen:
            raise FormatError(f"{path}: duplicated view name {name!r}")
        seen.add(name)
        try:
            cam = Camera(
                name=name,
                fx=float(rec["fx"]),
                fy=float(rec["fy"]),
                cx=float(rec["cx"]),
                cy=float(rec["cy"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
                world_to_camera=np.asarray(rec["world_to_camera"], dtype=np.float64),
                mask=rec.get("mask"),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: view {name!r} lacks field {exc.args[0]!r}") from None
        cam.validate()
        cams.append(cam)
    return cams


def save_cameras(cameras, path) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in cameras]}, indent=1))


# --- masks -----------------------------------------------------------------


def mask_filename(camera: Camera) -> str:
    return camera.mask or f"{camera.name}.png"


def read_id_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I", "L"):
            raise FormatError(f"{path}: expected single-channel 8/16-bit image, got mode {im.mode}")
        return np.array(im, dtype=np.int64)


def write_id_image(path, ids) -> None:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 65535:
        raise DataError(f"{path}: ids must fit in 16 bits")
    Image.fromarray(ids.astype(np.uint16)).save(path)


def load_id_masks(directory, cameras, workers: int = 4) -> list[IdMask]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"mask directory {directory} does not exist")
    paths = [directory / mask_filename(c) for c in cameras]
    missing = [c.name for c, p in zip(cameras, paths) if not p.is_file()]
    if missing:
        raise FormatError(f"missing masks for views: {', '.join(missing)}")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rasters = list(pool.map(read_id_image, paths))
    masks = []
    for cam, ids in zip(cameras, rasters):
        if ids.shape != (cam.height, cam.width):
            raise DataError(
                f"mask for view {cam.name!r} is {ids.shape[1]}x{ids.shape[0]}, "
                f"camera is {cam.width}x{cam.height}"
            )
        masks.append(IdMask(ids))
    return masks
