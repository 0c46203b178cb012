"""Lift multi-view instance ids onto Gaussians and score rendered masks."""
from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

from .render import DepthMap, NEAR_PLANE, render_surface_depth
from .scene_io import Camera, GaussianScene, IdMask

log = logging.getLogger(__name__)


class VoteTable:
    """Per-Gaussian vote counts, one count array per object id.

    Counts are integers, so accumulation commutes: the table does not depend
    on the order in which views are processed.
    """

    def __init__(self, n_gaussians: int):
        self.n_gaussians = int(n_gaussians)
        self._counts: dict[int, np.ndarray] = {}

    def add(self, gaussian_index: np.ndarray, ids: np.ndarray) -> None:
        gaussian_index = np.asarray(gaussian_index, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        for oid in np.unique(ids):
            sel = gaussian_index[ids == oid]
            arr = self._counts.setdefault(int(oid), np.zeros(self.n_gaussians, np.int64))
            arr += np.bincount(sel, minlength=self.n_gaussians)

    def merge(self, other: VoteTable) -> None:
        for oid, arr in other._counts.items():
            self._counts.setdefault(oid, np.zeros(self.n_gaussians, np.int64))
            self._counts[oid] += arr

    @property
    def ids(self) -> np.ndarray:
        return np.array(sorted(self._counts), dtype=np.int64)

    def matrix(self) -> np.ndarray:
        """Counts as (n_ids, n_gaussians), rows in ascending id order."""
        if not self._counts:
            return np.zeros((0, self.n_gaussians), np.int64)
        return np.stack([self._counts[i] for i in self.ids])

    def totals(self) -> np.ndarray:
        return self.matrix().sum(axis=0) if self._counts else np.zeros(self.n_gaussians, np.int64)

    def votes_for(self, gaussian: int) -> dict[int, int]:
        return {oid: int(c[gaussian]) for oid, c in sorted(self._counts.items()) if c[gaussian]}


def assign_view_votes(scene: GaussianScene, camera: Camera, depth_map: DepthMap,
                      id_mask: IdMask, tau_d: float, votes: VoteTable | None = None) -> VoteTable:
    """Add one vote per Gaussian whose center lies on the view's surface.

    A Gaussian votes for the mask id at its (nearest) pixel when
    ``|z_c - d| <= d * tau_d``; background id 0, sentinel depths and
    off-image Gaussians cast nothing.
    """
    if (depth_map.height, depth_map.width) != (camera.height, camera.width) or (
        id_mask.height, id_mask.width) != (camera.height, camera.width):
        raise ValueError(f"view {camera.name!r}: depth/mask size does not match camera")
    if votes is None:
        votes = VoteTable(len(scene))
    uv, z = camera.project(scene.means)
    ok = z > NEAR_PLANE
    col = np.floor(np.where(ok, uv[:, 0], -1)).astype(np.int64)
    row = np.floor(np.where(ok, uv[:, 1], -1)).astype(np.int64)
    ok &= (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    g = np.flatnonzero(ok)
    d = depth_map.depth[row[g], col[g]]
    hit = (d != depth_map.sentinel) & (np.abs(z[g] - d) <= d * tau_d)
    g = g[hit]
    ids = id_mask.ids[row[g], col[g]]
    fg = ids != 0
    votes.add(g[fg], ids[fg])
    return votes


def vote_final_ids(votes: VoteTable) -> np.ndarray:
    """Plurality id per Gaussian; no votes -> 0, ties -> smallest id."""
    mat = votes.matrix()
    if mat.shape[0] == 0:
        return np.zeros(votes.n_gaussians, np.int64)
    # rows ascend by id, argmax returns the first maximum
    winner = votes.ids[np.argmax(mat, axis=0)]
    return np.where(mat.sum(axis=0) > 0, winner, 0)


def segment(scene: GaussianScene, cameras, masks, tau_T: float = 0.5, tau_d: float = 0.03,
            backend=None):
    """Surface depth per view, votes across views, final ids.

    Returns (ids, votes, depth_maps).
    """
    votes = VoteTable(len(scene))
    depth_maps = []
    for cam, mask in zip(cameras, masks):
        dm = render_surface_depth(scene, cam, tau_T, backend=backend)
        assign_view_votes(scene, cam, dm, mask, tau_d, votes)
        depth_maps.append(dm)
    return vote_final_ids(votes), votes, depth_maps


def extract_object(scene: GaussianScene, object_id: int) -> GaussianScene:
    if scene.object_ids is None:
        raise ValueError("scene has no object ids; run segmentation first")
    sel = scene.object_ids == object_id
    if not sel.any():
        log.warning("object id %d not present in scene", object_id)
    return scene.subset(sel)


def split_object(scene: GaussianScene, object_id: int) -> tuple[GaussianScene, GaussianScene]:
    """(object, complement), both in original order."""
    sel = scene.object_ids == object_id
    return scene.subset(sel), scene.subset(~sel)


def _as_stack(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    return pred, gt


def _iou(p, g):
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return np.logical_and(p, g).sum() / union


def miou(pred_mask, gt_mask) -> float:
    """Mean IoU over objects; masks are (H,W) or stacked per object (K,H,W)."""
    pred, gt = _as_stack(pred_mask, gt_mask)
    return float(np.mean([_iou(p, g) for p, g in zip(pred, gt)]))


def default_boundary_radius(height: int, width: int) -> int:
    return max(1, int(round(0.02 * np.hypot(height, width))))


def boundary_band(mask: np.ndarray, radius: int) -> np.ndarray:
    """Mask pixels within ``radius`` (chessboard) of a non-mask pixel; outside the image counts as background."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    inner = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool),
                                   iterations=radius, border_value=0)
    return mask & ~inner


def mbiou(pred_mask, gt_mask, boundary_radius: int | None = None) -> float:
    """Mean Boundary IoU over objects."""
    pred, gt = _as_stack(pred_mask, gt_mask)
    r = default_boundary_radius(*pred.shape[1:]) if boundary_radius is None else boundary_radius
    if r < 1:
        raise ValueError("boundary_radius must be >= 1 pixel")
    return float(np.mean([_iou(boundary_band(p, r), boundary_band(g, r)) for p, g in zip(pred, gt)]))
