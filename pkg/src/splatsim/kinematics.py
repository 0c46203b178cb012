"""Pose Gaussians from simulated particles.

Each Gaussian follows its particle: the center is the particle position and
the covariance is the rest covariance pushed through the particle's
deformation gradient, Σ' = F Σ Fᵀ. Σ' is eigen-decomposed, its axes are
matched to the rest frame, the axis lengths are clamped to [tau_min, tau_max]
and only a fraction (lambda_R, lambda_S) of the resulting rotation/scale
change is applied. That keeps strongly stretched or squashed splats from
turning into needles or vanishing points.

All functions work on single matrices or on (N, 3, 3) / (N, 3) batches.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .scene_io import GaussianScene

MIN_SCALE = 1e-6
DEFAULT_LAMBDA_R = 1.2
DEFAULT_LAMBDA_S = 0.8
TAU_MIN_FACTOR = 0.3
TAU_MAX_FACTOR = 3.0
# relative eigenvalue gap below which two axes count as the same axis
DEGENERACY_TOL = 1e-8
MODES = ("clamped", "raw", "fixed")


@dataclasses.dataclass(frozen=True)
class ClampParams:
    """Scale bounds and correction weights.

    ``tau_min``/``tau_max`` left as None are filled per object from the rest
    scales (0.3x and 3x the median).
    """

    tau_min: float | None = None
    tau_max: float | None = None
    lambda_R: float = DEFAULT_LAMBDA_R
    lambda_S: float = DEFAULT_LAMBDA_S

    def __post_init__(self):
        if self.lambda_R < 0 or self.lambda_S < 0:
            raise ConfigError(f"lambda_R, lambda_S must be >= 0, got {self.lambda_R}, {self.lambda_S}")
        if self.tau_min is not None and self.tau_min <= 0:
            raise ConfigError(f"tau_min must be > 0, got {self.tau_min}")
        if self.tau_min is not None and self.tau_max is not None and not self.tau_min < self.tau_max:
            raise ConfigError(f"need tau_min < tau_max, got {self.tau_min} >= {self.tau_max}")

    def bounds_for(self, rest_scales: np.ndarray) -> tuple[float, float]:
        """(tau_min, tau_max) for one object with the given (N, 3) rest scales."""
        med = float(np.median(rest_scales)) if np.size(rest_scales) else 1.0
        lo = TAU_MIN_FACTOR * med if self.tau_min is None else self.tau_min
        hi = TAU_MAX_FACTOR * med if self.tau_max is None else self.tau_max
        if not 0 < lo < hi:
            raise ConfigError(f"invalid scale bounds ({lo}, {hi})")
        return lo, hi


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianPose:
    """Intermediate quantities of the covariance chain (batched)."""

    R_rest: np.ndarray
    S_rest: np.ndarray
    Q_matched: np.ndarray
    S_deformed: np.ndarray
    S_clamped: np.ndarray
    R_blend: np.ndarray
    S_blend: np.ndarray
    transform: np.ndarray


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def deformed_covariance(R, S, F) -> np.ndarray:
    """Σ' = F R diag(S)² Rᵀ Fᵀ, symmetrized."""
    R, S, F = (np.asarray(a, dtype=np.float64) for a in (R, S, F))
    bad = ~np.isfinite(F.reshape(-1, 9)).all(axis=1)
    if bad.any():
        p = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite deformation gradient for particle {p}", particle=p)
    A = F @ (R * S[..., None, :])
    return _sym(A @ np.swapaxes(A, -1, -2))


def _match_columns(R_rest, Q, lam):
    """Greedy max-|dot| assignment of eigenvectors (columns of Q) to rest axes."""
    n = Q.shape[0]
    dots = np.swapaxes(R_rest, 1, 2) @ Q  # dots[i, a, b] = r_a . q_b
    score = np.abs(dots)
    rows = np.arange(n)
    Qm = np.empty_like(Q)
    lm = np.empty_like(lam)
    for _ in range(3):
        flat = np.argmax(score.reshape(n, 9), axis=1)
        a, b = flat // 3, flat % 3
        sign = np.where(dots[rows, a, b] < 0, -1.0, 1.0)
        Qm[rows, :, a] = Q[rows, :, b] * sign[:, None]
        lm[rows, a] = lam[rows, b]
        score[rows, a, :] = -1.0
        score[rows, :, b] = -1.0
    return Qm, lm


def _match_axial(R_rest, q):
    """Rest-aligned frame when two eigenvalues coincide.

    ``q`` is the eigenvector of the simple eigenvalue. It takes the rest axis
    it is most aligned with; the other two rest axes are projected into the
    degenerate plane and orthonormalized, so the frame moves no more than
    the deformation forces it to.
    """
    rows = np.arange(q.shape[0])
    dots = np.einsum("nia,ni->na", R_rest, q)
    a = np.argmax(np.abs(dots), axis=1)
    q = q * np.where(dots[rows, a] < 0, -1.0, 1.0)[:, None]
    Qm = np.empty_like(R_rest)
    Qm[rows, :, a] = q
    others = np.array([[1, 2], [0, 2], [0, 1]])[a]
    j, k = others[:, 0], others[:, 1]
    rj = R_rest[rows, :, j]
    u = rj - np.sum(rj * q, axis=1, keepdims=True) * q
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    # rest axis j may be (anti)parallel to q; fall back to rest axis k
    rk = R_rest[rows, :, k]
    alt = np.cross(q, rk)
    u = np.where(nu > 1e-8, u / np.maximum(nu, 1e-300), alt / np.linalg.norm(alt, axis=1, keepdims=True))
    w = np.cross(q, u)
    # orient w so it agrees with rest axis k
    w *= np.where(np.sum(w * rk, axis=1) < 0, -1.0, 1.0)[:, None]
    Qm[rows, :, j] = u
    Qm[rows, :, k] = w
    return Qm


def eigen_decompose_matched(cov, R_rest):
    """Eigen-decompose Σ' with axes aligned to the rest rotation.

    Returns (Q_matched, S') where S' = sqrt(max(eigenvalue, 0)) and column i
    of Q_matched is the eigenvector assigned to rest axis i (positive dot,
    det forced to +1). Isotropic Σ' returns R_rest; with a repeated pair
    the frame is the rest frame projected onto the eigenspaces.
    """
    cov = np.asarray(cov, dtype=np.float64)
    R_rest = np.asarray(R_rest, dtype=np.float64)
    single = cov.ndim == 2
    cov = cov.reshape(-1, 3, 3)
    R_rest = np.broadcast_to(R_rest, cov.shape).copy()
    lam, Q = np.linalg.eigh(_sym(cov))  # ascending
    lam = np.maximum(lam, 0.0)
    Qm, lm = _match_columns(R_rest, Q, lam)
    det = np.linalg.det(Qm)
    Qm[det < 0, :, 2] *= -1.0

    tol = DEGENERACY_TOL * np.maximum(lam[:, 2], 1e-300)
    low_pair = (lam[:, 1] - lam[:, 0]) <= tol
    high_pair = (lam[:, 2] - lam[:, 1]) <= tol
    iso = low_pair & high_pair
    if iso.any():
        Qm[iso] = R_rest[iso]
        lm[iso] = lam[iso].mean(axis=1, keepdims=True)
    for pair, simple, members in ((low_pair & ~iso, 2, [0, 1]), (high_pair & ~iso, 0, [1, 2])):
        if pair.any():
            Qm[pair] = _match_axial(R_rest[pair], Q[pair, :, simple])
            lm[pair] = _axial_eigs(Qm[pair], Q[pair, :, simple], lam[pair, simple],
                                   lam[pair][:, members].mean(axis=1))
    S = np.sqrt(lm)
    if single:
        return Qm[0], S[0]
    return Qm, S


def _axial_eigs(Qm, q, lam_single, lam_pair):
    on_axis = np.abs(np.einsum("nia,ni->na", Qm, q)) > 0.5
    return np.where(on_axis, lam_single[:, None], lam_pair[:, None])


def adaptive_eigen_clamp(S, tau_min, tau_max) -> np.ndarray:
    """Componentwise clamp of axis lengths into [tau_min, tau_max]."""
    return np.clip(np.asarray(S, dtype=np.float64), tau_min, tau_max)


def blend_correction(R_rest, S_rest, Q_matched, S_clamped, lambda_R, lambda_S):
    """R^t = R + λ_R (Q - R), S^t = max(S + λ_S (S^τ - S), 1e-6)."""
    R_rest = np.asarray(R_rest, dtype=np.float64)
    S_rest = np.asarray(S_rest, dtype=np.float64)
    S_clamped = np.asarray(S_clamped, dtype=np.float64)
    R_t = R_rest + lambda_R * (np.asarray(Q_matched) - R_rest)
    S_t = S_rest + lambda_S * (S_clamped - S_rest)
    if 0.0 <= lambda_S <= 1.0:
        # an interpolation never leaves [S, S^τ]; clipping removes rounding past the ends
        S_t = np.clip(S_t, np.minimum(S_rest, S_clamped), np.maximum(S_rest, S_clamped))
    return R_t, np.maximum(S_t, MIN_SCALE)


def nearest_rotation(M) -> np.ndarray:
    """Closest proper rotation to each matrix (polar factor)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def compose_render_transform(R_t, S_t) -> np.ndarray:
    """A = R^t diag(S^t); the rendered covariance is A Aᵀ."""
    return np.asarray(R_t, dtype=np.float64) * np.asarray(S_t, dtype=np.float64)[..., None, :]


def pose_chain(R_rest, S_rest, F, tau_min, tau_max, lambda_R, lambda_S,
               orthonormalize: bool = False) -> GaussianPose:
    """Full clamped chain for a batch; tau bounds may be scalars or per-Gaussian arrays."""
    R_rest = np.asarray(R_rest, dtype=np.float64).reshape(-1, 3, 3)
    S_rest = np.asarray(S_rest, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(F, dtype=np.float64).reshape(-1, 3, 3)
    cov = deformed_covariance(R_rest, S_rest, F)
    Q, S_def = eigen_decompose_matched(cov, R_rest)
    tau_min = np.asarray(tau_min, dtype=np.float64)
    tau_max = np.asarray(tau_max, dtype=np.float64)
    if tau_min.ndim == 1:
        tau_min, tau_max = tau_min[:, None], tau_max[:, None]
    S_tau = adaptive_eigen_clamp(S_def, tau_min, tau_max)
    R_t, S_t = blend_correction(R_rest, S_rest, Q, S_tau, lambda_R, lambda_S)
    if orthonormalize:
        R_t = nearest_rotation(R_t)
    A = compose_render_transform(R_t, S_t)
    return GaussianPose(R_rest, S_rest, Q, S_def, S_tau, R_t, S_t, A)


def per_gaussian_bounds(scene: GaussianScene, params: ClampParams):
    """tau_min/tau_max arrays, computed per object id (one group if the scene has no ids)."""
    scales = scene.scales
    ids = scene.object_ids if scene.object_ids is not None else np.zeros(len(scene), np.int64)
    lo = np.empty(len(scene))
    hi = np.empty(len(scene))
    for oid in np.unique(ids):
        sel = ids == oid
        lo[sel], hi[sel] = params.bounds_for(scales[sel])
    return lo, hi


def update_gaussians(scene: GaussianScene, gaussian_index, x, F, params: ClampParams | None = None,
                     mode: str = "clamped", orthonormalize: bool = False) -> GaussianScene:
    """Copy of ``scene`` with the simulated Gaussians moved to ``x`` and deformed by ``F``.

    ``gaussian_index[p]`` is the scene row driven by particle p. Opacity and
    SH are untouched. ``mode``: "clamped" (matched, clamped, blended),
    "raw" (A = F A_rest, i.e. Σ' as is) or "fixed" (translation only).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown kinematics mode {mode!r}; expected one of {MODES}")
    params = params or ClampParams()
    gi = np.asarray(gaussian_index, dtype=np.int64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(F, dtype=np.float64).reshape(-1, 3, 3)
    n = len(scene)
    if not len(gi) == len(x) == len(F):
        raise DataError(f"particle arrays disagree: {len(gi)} indices, {len(x)} positions, {len(F)} F")
    if len(gi) and (gi.min() < 0 or gi.max() >= n):
        raise DataError(f"gaussian_index out of range for a scene of {n} Gaussians")
    if len(np.unique(gi)) != len(gi):
        raise DataError("gaussian_index maps two particles to one Gaussian")

    A = scene.linear_transforms().copy()
    means = scene.means.copy()
    means[gi] = x
    if len(gi) and mode != "fixed":
        sub = scene.subset(gi)
        if mode == "raw":
            A[gi] = F @ sub.linear_transforms()
        else:
            lo, hi = per_gaussian_bounds(sub, params)
            pose = pose_chain(sub.rotation_matrices(), sub.scales, F, lo, hi,
                              params.lambda_R, params.lambda_S, orthonormalize)
            A[gi] = pose.transform
    return scene.replace(means=means, transforms=A)


def axis_ratios(A) -> np.ndarray:
    """Longest over shortest axis of each splat with covariance A Aᵀ."""
    s = np.linalg.svd(np.asarray(A, dtype=np.float64).reshape(-1, 3, 3), compute_uv=False)
    return s[:, 0] / np.maximum(s[:, 2], 1e-300)


def save_posed(path, means, transforms) -> None:
    """Dump (μ, A) of a posed frame for offline re-rendering."""
    np.savez(path, means=np.asarray(means), transforms=np.asarray(transforms))


def load_posed(path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as z:
        return z["means"], z["transforms"]
