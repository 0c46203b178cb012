"""Backend selection for the hot loops.

The compiled ``_core`` extension is used when it imports; otherwise the numpy
fallback. ``SPLATSIM_BACKEND=python`` forces the fallback and
``SPLATSIM_NUM_THREADS`` sets the OpenMP thread count (default: all cores).
Both paths are deterministic and independent of the thread count.
"""
from __future__ import annotations

import logging
import os

import numpy as np

from . import _fallback

log = logging.getLogger(__name__)

TILE_SIZE = 16
BLOCK_CELLS = 4

try:
    from . import _core
except ImportError:  # pragma: no cover - depends on the build
    _core = None

if os.environ.get("SPLATSIM_BACKEND", "").lower() == "python" or _core is None:
    BACKEND = "python"
else:
    BACKEND = "cython"


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _core is not None else [])


def num_threads() -> int:
    env = os.environ.get("SPLATSIM_NUM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _pick(backend):
    backend = backend or BACKEND
    if backend == "cython":
        if _core is None:
            raise RuntimeError("compiled backend is not built")
        return _core
    if backend == "python":
        return _fallback
    raise ValueError(f"unknown backend {backend!r}")


def color_blocks(base: np.ndarray, grid_shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group particles by 4-cell block and 8-coloring of blocks.

    Returns (order, seg_start, color_start): ``order`` sorts particles by
    (color, block, index); segment s spans order[seg_start[s]:seg_start[s+1]];
    color c owns segments color_start[c]:color_start[c+1].
    """
    n = base.shape[0]
    if n == 0:
        return (np.empty(0, np.int64), np.zeros(1, np.int64), np.zeros(9, np.int64))
    blk = base // BLOCK_CELLS
    nb = [int(s) // BLOCK_CELLS + 1 for s in grid_shape]
    color = (blk[:, 0] & 1) + 2 * (blk[:, 1] & 1) + 4 * (blk[:, 2] & 1)
    block_id = np.ravel_multi_index(tuple(blk.T), nb)
    nblocks = nb[0] * nb[1] * nb[2]
    key = color.astype(np.int64) * nblocks + block_id
    order = np.argsort(key, kind="stable").astype(np.int64)
    skey = key[order]
    change = np.flatnonzero(np.diff(skey)) + 1
    seg_start = np.concatenate(([0], change, [n])).astype(np.int64)
    seg_color = skey[seg_start[:-1]] // nblocks
    color_start = np.searchsorted(seg_color, np.arange(9)).astype(np.int64)
    return order, seg_start, color_start


def p2g(x, v, mass, affine, origin, dx, grid_m, grid_mv, *, backend=None, threads=None):
    """Accumulate particle mass and affine momentum into grid_m / grid_mv (in place)."""
    mod = _pick(backend)
    x = np.ascontiguousarray(x, dtype=np.float64)
    base = np.floor((x - origin) / dx - 0.5).astype(np.int64)
    order, seg_start, color_start = color_blocks(base, grid_m.shape)
    mod.p2g_scatter(
        x,
        np.ascontiguousarray(v, dtype=np.float64),
        np.ascontiguousarray(mass, dtype=np.float64),
        np.ascontiguousarray(affine, dtype=np.float64),
        np.ascontiguousarray(origin, dtype=np.float64),
        float(dx),
        order,
        seg_start,
        color_start,
        grid_m,
        grid_mv,
        threads or num_threads(),
    )


def g2p(grid_v, origin, dx, x, *, backend=None, threads=None):
    """Return (v, C) interpolated from the grid velocity field."""
    mod = _pick(backend)
    return mod.g2p_gather(
        np.ascontiguousarray(grid_v, dtype=np.float64),
        np.ascontiguousarray(origin, dtype=np.float64),
        float(dx),
        np.ascontiguousarray(x, dtype=np.float64),
        threads or num_threads(),
    )


def bin_tiles(bbox, order, width, height, tile=TILE_SIZE):
    """CSR list of splat ids per tile, each list in front-to-back order."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    ntiles = tiles_x * tiles_y
    b = bbox[order]
    keep = (b[:, 1] > b[:, 0]) & (b[:, 3] > b[:, 2])
    ids = order[keep]
    b = b[keep]
    if ids.size == 0:
        return np.empty(0, np.int64), np.zeros(ntiles + 1, np.int64)
    tx0 = b[:, 0] // tile
    tx1 = (b[:, 1] - 1) // tile
    ty0 = b[:, 2] // tile
    ty1 = (b[:, 3] - 1) // tile
    ntx = tx1 - tx0 + 1
    counts = ntx * (ty1 - ty0 + 1)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(int(counts.sum())) - offsets
    ntx_r = np.repeat(ntx, counts)
    tx = np.repeat(tx0, counts) + local % ntx_r
    ty = np.repeat(ty0, counts) + local // ntx_r
    tile_id = ty * tiles_x + tx
    # stable sort keeps front-to-back order within each tile
    perm = np.argsort(tile_id, kind="stable")
    tile_list = np.repeat(ids, counts)[perm].astype(np.int64)
    tile_start = np.zeros(ntiles + 1, np.int64)
    np.cumsum(np.bincount(tile_id, minlength=ntiles), out=tile_start[1:])
    return tile_list, tile_start


def rasterize(means, conics, opacity, colors, depths, bbox, order, width, height,
              background, tau_t, alpha_max, t_stop, min_alpha, *, backend=None,
              threads=None):
    """Front-to-back compositing; returns (image HxWx3, transmittance HxW, depth HxW).

    ``depth`` is NaN where transmittance never fell below ``tau_t``.
    """
    backend = backend or BACKEND
    args = (
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(conics, dtype=np.float64),
        np.ascontiguousarray(opacity, dtype=np.float64),
        np.ascontiguousarray(colors, dtype=np.float64),
        np.ascontiguousarray(depths, dtype=np.float64),
        np.ascontiguousarray(bbox, dtype=np.int64),
    )
    order = np.ascontiguousarray(order, dtype=np.int64)
    background = np.ascontiguousarray(background, dtype=np.float64)
    if backend == "python":
        return _fallback.rasterize(*args, order, width, height, background, tau_t,
                                   alpha_max, t_stop, min_alpha)
    tile_list, tile_start = bin_tiles(args[5], order, width, height)
    return _pick(backend).rasterize_tiles(
        *args, tile_list, tile_start, int(width), int(height), TILE_SIZE, background,
        float(tau_t), float(alpha_max), float(t_stop), float(min_alpha),
        threads or num_threads(),
    )


def stress_affine(F, C, mass, volume, mu, lam, dt, inv_w, *, backend=None, threads=None):
    """Per-particle MLS-MPM affine momentum matrix with fixed-corotated stress.

    Writes the singular-value-clamped F back into ``F``; returns (affine, clamped).
    """
    mod = _pick(backend)
    f64 = np.float64
    return mod.stress_affine(F, np.ascontiguousarray(C, f64), np.ascontiguousarray(mass, f64),
                             np.ascontiguousarray(volume, f64), np.ascontiguousarray(mu, f64),
                             np.ascontiguousarray(lam, f64), float(dt), float(inv_w),
                             _fallback.MIN_SINGULAR_VALUE, threads or num_threads())
