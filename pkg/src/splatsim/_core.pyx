# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: MLS-MPM particle/grid transfers and tiled splat compositing.

Signatures mirror :mod:`splatsim._fallback`; :mod:`splatsim.kernels` picks one
at import time.
"""
import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, fabs, floor, sqrt

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline void _bspline_weights(double fx, double* w) noexcept nogil:
    w[0] = 0.5 * (1.5 - fx) * (1.5 - fx)
    w[1] = 0.75 - (fx - 1.0) * (fx - 1.0)
    w[2] = 0.5 * (fx - 0.5) * (fx - 0.5)


cdef void _scatter_particle(i64 p, const double* x, const double* v,
                            const double* mass, const double* affine,
                            const double* origin, double dx,
                            double* gm, double* gmv, i64 ny, i64 nz) noexcept nogil:
    cdef double wx[3]
    cdef double wy[3]
    cdef double wz[3]
    cdef double fx[3]
    cdef i64 base[3]
    cdef int d, i, j, k
    cdef double X, w, wxy, dpx, dpy, dpz, m, mvx, mvy, mvz
    cdef const double* A = affine + 9 * p
    cdef i64 node
    cdef double inv_dx = 1.0 / dx

    for d in range(3):
        X = (x[3 * p + d] - origin[d]) * inv_dx
        base[d] = <i64>floor(X - 0.5)
        fx[d] = X - <double>base[d]
    _bspline_weights(fx[0], wx)
    _bspline_weights(fx[1], wy)
    _bspline_weights(fx[2], wz)

    m = mass[p]
    mvx = m * v[3 * p]
    mvy = m * v[3 * p + 1]
    mvz = m * v[3 * p + 2]
    for i in range(3):
        dpx = (i - fx[0]) * dx
        for j in range(3):
            dpy = (j - fx[1]) * dx
            wxy = wx[i] * wy[j]
            for k in range(3):
                dpz = (k - fx[2]) * dx
                w = wxy * wz[k]
                node = ((base[0] + i) * ny + base[1] + j) * nz + base[2] + k
                gm[node] += w * m
                gmv[3 * node] += w * (mvx + A[0] * dpx + A[1] * dpy + A[2] * dpz)
                gmv[3 * node + 1] += w * (mvy + A[3] * dpx + A[4] * dpy + A[5] * dpz)
                gmv[3 * node + 2] += w * (mvz + A[6] * dpx + A[7] * dpy + A[8] * dpz)


def p2g_scatter(const double[:, ::1] x, const double[:, ::1] v,
                const double[::1] mass, const double[:, :, ::1] affine,
                const double[::1] origin, double dx,
                const i64[::1] order, const i64[::1] seg_start,
                const i64[::1] color_start,
                double[:, :, ::1] grid_m, double[:, :, :, ::1] grid_mv,
                int num_threads=1):
    """Scatter mass and affine momentum onto the grid.

    ``order`` lists particles grouped into 4-cell blocks; ``seg_start`` delimits
    blocks and ``color_start`` delimits the 8 block colors. Blocks of one color
    touch disjoint nodes, so each color is processed in parallel while the
    per-node accumulation order stays fixed.
    """
    cdef i64 ny = grid_m.shape[1]
    cdef i64 nz = grid_m.shape[2]
    cdef int c
    cdef i64 s, q, s_lo, s_hi
    cdef const double* xp = &x[0, 0] if x.shape[0] else NULL
    cdef const double* vp = &v[0, 0] if v.shape[0] else NULL
    cdef const double* mp = &mass[0] if mass.shape[0] else NULL
    cdef const double* ap = &affine[0, 0, 0] if affine.shape[0] else NULL
    cdef double* gm = &grid_m[0, 0, 0]
    cdef double* gmv = &grid_mv[0, 0, 0, 0]
    if x.shape[0] == 0:
        return
    for c in range(8):
        s_lo = color_start[c]
        s_hi = color_start[c + 1]
        for s in prange(s_lo, s_hi, nogil=True,
                        num_threads=num_threads, schedule="static"):
            for q in range(seg_start[s], seg_start[s + 1]):
                _scatter_particle(order[q], xp, vp, mp, ap, &origin[0], dx,
                                  gm, gmv, ny, nz)


cdef void _gather_particle(i64 p, const double* x, const double* origin,
                           double dx, const double* gv, i64 ny, i64 nz,
                           double* vout, double* cout) noexcept nogil:
    cdef double wx[3]
    cdef double wy[3]
    cdef double wz[3]
    cdef double fx[3]
    cdef double dp[3]
    cdef double b[9]
    cdef i64 base[3]
    cdef int d, e, i, j, k
    cdef double X, w, scale
    cdef const double* g
    cdef i64 node
    cdef double inv_dx = 1.0 / dx

    for d in range(3):
        X = (x[3 * p + d] - origin[d]) * inv_dx
        base[d] = <i64>floor(X - 0.5)
        fx[d] = X - <double>base[d]
    _bspline_weights(fx[0], wx)
    _bspline_weights(fx[1], wy)
    _bspline_weights(fx[2], wz)
    for d in range(3):
        vout[3 * p + d] = 0.0
    for d in range(9):
        b[d] = 0.0
    for i in range(3):
        dp[0] = (i - fx[0]) * dx
        for j in range(3):
            dp[1] = (j - fx[1]) * dx
            for k in range(3):
                dp[2] = (k - fx[2]) * dx
                w = wx[i] * wy[j] * wz[k]
                node = ((base[0] + i) * ny + base[1] + j) * nz + base[2] + k
                g = gv + 3 * node
                for d in range(3):
                    vout[3 * p + d] += w * g[d]
                    for e in range(3):
                        b[3 * d + e] += w * g[d] * dp[e]
    scale = 4.0 * inv_dx * inv_dx
    for d in range(9):
        cout[9 * p + d] = scale * b[d]


def g2p_gather(const double[:, :, :, ::1] grid_v, const double[::1] origin,
               double dx, const double[:, ::1] x, int num_threads=1):
    """Interpolate grid velocity to particles; returns (v, C)."""
    cdef i64 n = x.shape[0]
    cdef i64 ny = grid_v.shape[1]
    cdef i64 nz = grid_v.shape[2]
    v_out = np.zeros((n, 3), dtype=np.float64)
    c_out = np.zeros((n, 3, 3), dtype=np.float64)
    if n == 0:
        return v_out, c_out
    cdef double[:, ::1] vv = v_out
    cdef double[:, :, ::1] cv = c_out
    cdef i64 p
    cdef const double* xp = &x[0, 0]
    cdef const double* gv = &grid_v[0, 0, 0, 0]
    cdef double* vo = &vv[0, 0]
    cdef double* co = &cv[0, 0, 0]
    for p in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        _gather_particle(p, xp, &origin[0], dx, gv, ny, nz, vo, co)
    return v_out, c_out


cdef void _shade_tile(i64 tile, int tiles_x, int tile_size, int width, int height,
                      const double* means, const double* conics, const double* opac,
                      const double* colors, const double* depths, const i64* bbox,
                      const i64* tile_list, const i64* tile_start,
                      const double* bg, double tau_t, double alpha_max,
                      double t_stop, double min_alpha,
                      double* image, double* trans, double* depth) noexcept nogil:
    cdef int tx = tile % tiles_x
    cdef int ty = tile // tiles_x
    cdef int x0 = tx * tile_size
    cdef int y0 = ty * tile_size
    cdef int x1 = x0 + tile_size
    cdef int y1 = y0 + tile_size
    cdef int px, py, ch
    cdef i64 q, g, pix
    cdef double T, test_t, alpha, power, ddx, ddy, d_rec
    cdef double acc[3]
    cdef bint have_depth
    if x1 > width:
        x1 = width
    if y1 > height:
        y1 = height
    for py in range(y0, y1):
        for px in range(x0, x1):
            T = 1.0
            acc[0] = 0.0
            acc[1] = 0.0
            acc[2] = 0.0
            have_depth = False
            d_rec = 0.0
            for q in range(tile_start[tile], tile_start[tile + 1]):
                g = tile_list[q]
                if px < bbox[4 * g] or px >= bbox[4 * g + 1] or py < bbox[4 * g + 2] or py >= bbox[4 * g + 3]:
                    continue
                ddx = means[2 * g] - (px + 0.5)
                ddy = means[2 * g + 1] - (py + 0.5)
                power = -0.5 * (conics[3 * g] * ddx * ddx + conics[3 * g + 2] * ddy * ddy) - conics[3 * g + 1] * ddx * ddy
                alpha = opac[g] * exp(power)
                if alpha < min_alpha:
                    continue
                if alpha > alpha_max:
                    alpha = alpha_max
                test_t = T * (1.0 - alpha)
                if not have_depth and test_t < tau_t:
                    have_depth = True
                    d_rec = depths[g]
                if test_t < t_stop:
                    break
                for ch in range(3):
                    acc[ch] += T * alpha * colors[3 * g + ch]
                T = test_t
            pix = <i64>py * width + px
            for ch in range(3):
                image[3 * pix + ch] = acc[ch] + T * bg[ch]
            trans[pix] = T
            if have_depth:
                depth[pix] = d_rec


def rasterize_tiles(const double[:, ::1] means, const double[:, ::1] conics,
                    const double[::1] opacity, const double[:, ::1] colors,
                    const double[::1] depths, const i64[:, ::1] bbox,
                    const i64[::1] tile_list, const i64[::1] tile_start,
                    int width, int height, int tile_size,
                    const double[::1] background, double tau_t,
                    double alpha_max, double t_stop, double min_alpha,
                    int num_threads=1):
    """Composite pre-binned splats per tile; returns (image, transmittance, depth)."""
    image = np.empty((height, width, 3), dtype=np.float64)
    trans = np.empty((height, width), dtype=np.float64)
    depth = np.full((height, width), np.nan, dtype=np.float64)
    cdef double[:, :, ::1] iv = image
    cdef double[:, ::1] tv = trans
    cdef double[:, ::1] dv = depth
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int tiles_y = (height + tile_size - 1) // tile_size
    cdef i64 ntiles = <i64>tiles_x * tiles_y
    cdef i64 t
    cdef const double* mp = &means[0, 0] if means.shape[0] else NULL
    cdef const double* cp = &conics[0, 0] if conics.shape[0] else NULL
    cdef const double* op = &opacity[0] if opacity.shape[0] else NULL
    cdef const double* colp = &colors[0, 0] if colors.shape[0] else NULL
    cdef const double* dp = &depths[0] if depths.shape[0] else NULL
    cdef const i64* bp = &bbox[0, 0] if bbox.shape[0] else NULL
    cdef const i64* tl = &tile_list[0] if tile_list.shape[0] else NULL
    if width == 0 or height == 0:
        return image, trans, depth
    for t in prange(ntiles, nogil=True, num_threads=num_threads, schedule="dynamic"):
        _shade_tile(t, tiles_x, tile_size, width, height, mp, cp, op, colp, dp,
                    bp, tl, &tile_start[0], &background[0], tau_t, alpha_max,
                    t_stop, min_alpha, &iv[0, 0, 0], &tv[0, 0], &dv[0, 0])
    return image, trans, depth


cdef void _jacobi_eig3(double* a, double* ev, double* V) noexcept nogil:
    """Eigen-decomposition of symmetric 3x3 ``a`` (row-major, destroyed); columns of V."""
    cdef int sweep, p, q, r, k
    cdef double off, apq, theta, t, c, s, app, aqq, arp, arq, vrp, vrq, scale
    for k in range(9):
        V[k] = 0.0
    V[0] = 1.0
    V[4] = 1.0
    V[8] = 1.0
    scale = a[0] * a[0] + a[4] * a[4] + a[8] * a[8]
    for sweep in range(50):
        off = a[1] * a[1] + a[2] * a[2] + a[5] * a[5]
        if off <= 1e-36 * scale or off == 0.0:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[3 * p + q]
                if apq == 0.0:
                    continue
                app = a[4 * p]
                aqq = a[4 * q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + sqrt(1.0 + theta * theta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                a[4 * p] = app - t * apq
                a[4 * q] = aqq + t * apq
                a[3 * p + q] = 0.0
                a[3 * q + p] = 0.0
                for r in range(3):
                    if r != p and r != q:
                        arp = a[3 * r + p]
                        arq = a[3 * r + q]
                        a[3 * r + p] = c * arp - s * arq
                        a[3 * p + r] = a[3 * r + p]
                        a[3 * r + q] = s * arp + c * arq
                        a[3 * q + r] = a[3 * r + q]
                for r in range(3):
                    vrp = V[3 * r + p]
                    vrq = V[3 * r + q]
                    V[3 * r + p] = c * vrp - s * vrq
                    V[3 * r + q] = s * vrp + c * vrq
    ev[0] = a[0]
    ev[1] = a[4]
    ev[2] = a[8]


cdef void _svd3(const double* F, double* U, double* sig, double* V) noexcept nogil:
    """F = U diag(sig) Vᵀ with U, V proper rotations; sig descending, sig[2] may be negative."""
    cdef double A[9]
    cdef double ev[3]
    cdef double W[9]
    cdef double b[9]
    cdef int i, j, k, idx[3]
    cdef double tmp, nrm, dot
    for i in range(3):
        for j in range(3):
            tmp = 0.0
            for k in range(3):
                tmp = tmp + F[3 * k + i] * F[3 * k + j]
            A[3 * i + j] = tmp
    _jacobi_eig3(A, ev, W)
    # order eigenpairs by descending eigenvalue
    idx[0] = 0
    idx[1] = 1
    idx[2] = 2
    for i in range(2):
        for j in range(2 - i):
            if ev[idx[j]] < ev[idx[j + 1]]:
                k = idx[j]
                idx[j] = idx[j + 1]
                idx[j + 1] = k
    for i in range(3):
        for j in range(3):
            V[3 * i + j] = W[3 * i + idx[j]]
    # det(V) must be +1
    tmp = (V[0] * (V[4] * V[8] - V[5] * V[7]) - V[1] * (V[3] * V[8] - V[5] * V[6])
           + V[2] * (V[3] * V[7] - V[4] * V[6]))
    if tmp < 0:
        V[2] = -V[2]
        V[5] = -V[5]
        V[8] = -V[8]
    # columns b_j = F v_j
    for i in range(3):
        for j in range(3):
            tmp = 0.0
            for k in range(3):
                tmp = tmp + F[3 * i + k] * V[3 * k + j]
            b[3 * i + j] = tmp
    nrm = sqrt(b[0] * b[0] + b[3] * b[3] + b[6] * b[6])
    if nrm > 1e-300:
        for i in range(3):
            U[3 * i] = b[3 * i] / nrm
    else:
        U[0] = 1.0
        U[3] = 0.0
        U[6] = 0.0
    dot = U[0] * b[1] + U[3] * b[4] + U[6] * b[7]
    for i in range(3):
        U[3 * i + 1] = b[3 * i + 1] - dot * U[3 * i]
    nrm = sqrt(U[1] * U[1] + U[4] * U[4] + U[7] * U[7])
    if nrm > 1e-12 * (1.0 + sqrt(ev[idx[0]] if ev[idx[0]] > 0 else 0.0)):
        for i in range(3):
            U[3 * i + 1] = U[3 * i + 1] / nrm
    else:
        # any unit vector orthogonal to u1
        if fabs(U[0]) < 0.9:
            U[1] = 0.0
            U[4] = -U[6]
            U[7] = U[3]
        else:
            U[1] = -U[3]
            U[4] = U[0]
            U[7] = 0.0
        nrm = sqrt(U[1] * U[1] + U[4] * U[4] + U[7] * U[7])
        for i in range(3):
            U[3 * i + 1] = U[3 * i + 1] / nrm
    U[2] = U[3] * U[7] - U[6] * U[4]
    U[5] = U[6] * U[1] - U[0] * U[7]
    U[8] = U[0] * U[4] - U[3] * U[1]
    for j in range(3):
        sig[j] = U[j] * b[j] + U[3 + j] * b[3 + j] + U[6 + j] * b[6 + j]


def svd3(const double[:, :, ::1] F):
    """Batch proper SVD; returns (U, sig, Vt) like the numpy fallback."""
    cdef i64 n = F.shape[0]
    U = np.empty((n, 3, 3))
    sig = np.empty((n, 3))
    V = np.empty((n, 3, 3))
    cdef double[:, :, ::1] Uv = U
    cdef double[:, ::1] sv = sig
    cdef double[:, :, ::1] Vv = V
    cdef i64 p
    for p in range(n):
        _svd3(&F[p, 0, 0], &Uv[p, 0, 0], &sv[p, 0], &Vv[p, 0, 0])
    return U, sig, np.ascontiguousarray(np.swapaxes(V, 1, 2))


def stress_affine(double[:, :, ::1] F, const double[:, :, ::1] C,
                  const double[::1] mass, const double[::1] volume,
                  const double[::1] mu, const double[::1] lam,
                  double dt, double inv_w, double min_sv, int num_threads=1):
    """APIC + MLS force matrix per particle: m C - dt V⁰ W⁻¹ τ, τ = P Fᵀ (fixed-corotated).

    Singular values below ``min_sv`` are clamped and the projected F is
    written back into ``F``. Returns (affine, clamped flags).
    """
    cdef i64 n = F.shape[0]
    affine = np.empty((n, 3, 3))
    clamped = np.zeros(n, dtype=np.uint8)
    if n == 0:
        return affine, clamped.astype(bool)
    cdef double[:, :, ::1] av = affine
    cdef cnp.uint8_t[::1] cl = clamped
    cdef i64 p
    for p in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        cl[p] = _stress_one(&F[p, 0, 0], &C[p, 0, 0], mass[p], volume[p], mu[p], lam[p],
                            dt, inv_w, min_sv, &av[p, 0, 0])
    return affine, clamped.astype(bool)


cdef cnp.uint8_t _stress_one(double* F, const double* C, double m, double vol, double mu,
                             double lam, double dt, double inv_w, double min_sv,
                             double* out) noexcept nogil:
    cdef double U[9]
    cdef double V[9]
    cdef double sig[3]
    cdef double ps[3]
    cdef double J, k
    cdef int i, j, c
    cdef cnp.uint8_t was_clamped = 0
    _svd3(F, U, sig, V)
    for i in range(3):
        if sig[i] < min_sv:
            sig[i] = min_sv
            was_clamped = 1
    J = sig[0] * sig[1] * sig[2]
    for i in range(3):
        ps[i] = (2.0 * mu * (sig[i] - 1.0) + lam * (J - 1.0) * J / sig[i]) * sig[i]
    k = dt * inv_w * vol
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = m * C[3 * i + j] - k * (U[3 * i] * ps[0] * U[3 * j]
                                                     + U[3 * i + 1] * ps[1] * U[3 * j + 1]
                                                     + U[3 * i + 2] * ps[2] * U[3 * j + 2])
    if was_clamped:
        for i in range(3):
            for j in range(3):
                F[3 * i + j] = (U[3 * i] * sig[0] * V[3 * j] + U[3 * i + 1] * sig[1] * V[3 * j + 1]
                                + U[3 * i + 2] * sig[2] * V[3 * j + 2])
    return was_clamped
