"""Pure numpy versions of the kernels in ``_core.pyx``.

Same signatures and the same per-pixel / per-node arithmetic; accumulation
order in ``p2g_scatter`` differs from the compiled path but is fixed, so
results are deterministic for either backend.
"""
from __future__ import annotations

import numpy as np

_OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])

MIN_SINGULAR_VALUE = 0.05


def proper_svd(F):
    """SVD with U, V proper rotations; reflections go into the sign of the last singular value."""
    U, sig, Vt = np.linalg.svd(F)
    # make U, V rotations; an inversion shows up as a negative last singular value
    du = np.linalg.det(U) < 0
    dv = np.linalg.det(Vt) < 0
    U[du, :, 2] *= -1
    sig[du, 2] *= -1
    Vt[dv, 2, :] *= -1
    sig[dv, 2] *= -1
    return U, sig, Vt


def fixed_corotated(F, mu, lam, min_sv=MIN_SINGULAR_VALUE):
    """Batch fixed-corotated stress.

    Returns (P, tau, F_used, clamped): first Piola-Kirchhoff stress,
    Kirchhoff stress P F_usedᵀ, the deformation gradient after clamping
    singular values to >= 0.05, and which particles were clamped.
    """
    F = np.asarray(F, dtype=np.float64).reshape(-1, 3, 3)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), F.shape[:1])
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), F.shape[:1])
    U, sig, Vt = proper_svd(F)
    clamped = (sig < min_sv).any(axis=1)
    sig = np.maximum(sig, min_sv)
    J = sig.prod(axis=1)
    p = 2.0 * mu[:, None] * (sig - 1.0) + (lam * (J - 1.0) * J)[:, None] / sig
    P = (U * p[:, None, :]) @ Vt
    tau = (U * (p * sig)[:, None, :]) @ np.swapaxes(U, 1, 2)
    F_used = F.copy()
    if clamped.any():
        F_used[clamped] = (U[clamped] * sig[clamped, None, :]) @ Vt[clamped]
    return P, tau, F_used, clamped




def stress_affine(F, C, mass, volume, mu, lam, dt, inv_w, min_sv=MIN_SINGULAR_VALUE, num_threads=1):
    """m C - dt V⁰ W⁻¹ τ per particle; clamped F is written back in place."""
    _, tau, F_used, clamped = fixed_corotated(F, mu, lam, min_sv)
    F[clamped] = F_used[clamped]
    affine = mass[:, None, None] * C - (dt * inv_w * volume)[:, None, None] * tau
    return affine, clamped



def bspline_stencil(x, origin, dx):
    """Base node index, fractional offset and per-axis quadratic weights (N,3,3)."""
    X = (x - origin) / dx
    base = np.floor(X - 0.5).astype(np.int64)
    fx = X - base
    w = np.stack(
        [0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2],
        axis=1,
    )
    return base, fx, w


def p2g_scatter(x, v, mass, affine, origin, dx, order, seg_start, color_start,
                grid_m, grid_mv, num_threads=1):
    n = x.shape[0]
    if n == 0:
        return
    base, fx, w = bspline_stencil(x, origin, dx)
    shape = grid_m.shape
    flat_m = grid_m.reshape(-1)
    flat_mv = grid_mv.reshape(-1, 3)
    mv = mass[:, None] * v
    for off in _OFFSETS:
        i, j, k = off
        weight = w[:, i, 0] * w[:, j, 1] * w[:, k, 2]
        dpos = (off - fx) * dx
        node = np.ravel_multi_index(tuple((base + off).T), shape)
        contrib = weight[:, None] * (mv + np.einsum("nij,nj->ni", affine, dpos))
        lo = node.min()
        rel = node - lo
        size = int(rel.max()) + 1
        flat_m[lo:lo + size] += np.bincount(rel, weights=weight * mass, minlength=size)
        for d in range(3):
            flat_mv[lo:lo + size, d] += np.bincount(rel, weights=contrib[:, d], minlength=size)


def g2p_gather(grid_v, origin, dx, x, num_threads=1):
    n = x.shape[0]
    v_out = np.zeros((n, 3))
    b = np.zeros((n, 3, 3))
    if n == 0:
        return v_out, b
    base, fx, w = bspline_stencil(x, origin, dx)
    flat_v = grid_v.reshape(-1, 3)
    shape = grid_v.shape[:3]
    for off in _OFFSETS:
        i, j, k = off
        weight = w[:, i, 0] * w[:, j, 1] * w[:, k, 2]
        dpos = (off - fx) * dx
        node = np.ravel_multi_index(tuple((base + off).T), shape)
        g = flat_v[node]
        v_out += weight[:, None] * g
        b += weight[:, None, None] * g[:, :, None] * dpos[:, None, :]
    return v_out, b * (4.0 / (dx * dx))


def rasterize(means, conics, opacity, colors, depths, bbox, order, width, height,
              background, tau_t, alpha_max, t_stop, min_alpha, num_threads=1):
    """Splat-major sweep over each splat's pixel box, in ``order`` (front to back)."""
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    depth = np.full((height, width), np.nan)
    done = np.zeros((height, width), dtype=bool)
    for g in order:
        x0, x1, y0, y1 = bbox[g]
        if x1 <= x0 or y1 <= y0:
            continue
        px = np.arange(x0, x1) + 0.5
        py = np.arange(y0, y1) + 0.5
        ddx = means[g, 0] - px[None, :]
        ddy = means[g, 1] - py[:, None]
        a, b, c = conics[g]
        power = -0.5 * (a * ddx * ddx + c * ddy * ddy) - b * ddx * ddy
        alpha = opacity[g] * np.exp(power)
        live = ~done[y0:y1, x0:x1] & (alpha >= min_alpha)
        if not live.any():
            continue
        alpha = np.minimum(alpha, alpha_max)
        T = trans[y0:y1, x0:x1]
        test_t = T * (1.0 - alpha)
        dwin = depth[y0:y1, x0:x1]
        rec = live & np.isnan(dwin) & (test_t < tau_t)
        dwin[rec] = depths[g]
        stop = live & (test_t < t_stop)
        done[y0:y1, x0:x1] |= stop
        blend = live & ~stop
        img = image[y0:y1, x0:x1]
        img += np.where(blend[..., None], (T * alpha)[..., None] * colors[g], 0.0)
        T[blend] = test_t[blend]
    image += trans[..., None] * np.asarray(background)
    return image, trans, depth
