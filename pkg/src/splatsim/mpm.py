"""MLS-MPM simulation of segmented Gaussians, one particle per Gaussian.

Grid nodes sit at ``origin + i * dx``; transfers use quadratic B-splines, for
which the MLS moment matrix is ``dx² / 4 · I``. Stress uses the
fixed-corotated model. Explicit symplectic Euler on the grid; a stable step
satisfies roughly ``dt <= 0.1 * dx / sqrt(E / rho)``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import zipfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from ._fallback import MIN_SINGULAR_VALUE, fixed_corotated, proper_svd
from .errors import ConfigError, NumericalError, SimulationError
from .scene_io import GaussianScene

log = logging.getLogger(__name__)

MODELS = ("fixed_corotated",)


@dataclasses.dataclass(frozen=True)
class Material:
    density: float = 1000.0
    youngs_modulus: float = 1.0e7
    poisson_ratio: float = 0.2
    model: str = "fixed_corotated"
    initial_velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown constitutive model {self.model!r}; expected one of {MODELS}")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ConfigError(f"poisson_ratio must lie in (0, 0.5), got {self.poisson_ratio}")
        if self.youngs_modulus <= 0 or self.density <= 0:
            raise ConfigError("youngs_modulus and density must be positive")
        object.__setattr__(self, "initial_velocity", tuple(float(c) for c in self.initial_velocity))
        if len(self.initial_velocity) != 3:
            raise ConfigError("initial_velocity must have 3 components")

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def wave_speed(self) -> float:
        return float(np.sqrt(self.youngs_modulus / self.density))


@dataclasses.dataclass
class GridConfig:
    """Background grid; ``dx``/``origin`` of None are fitted to the particles."""

    resolution: tuple = (64, 64, 64)
    dx: float | None = None
    origin: tuple | None = None
    boundary_cells: int = 3
    ground_height: float | None = None

    def __post_init__(self):
        res = self.resolution
        self.resolution = tuple(int(r) for r in ((res,) * 3 if np.isscalar(res) else res))
        if len(self.resolution) != 3 or min(self.resolution) < 2 * self.boundary_cells + 3:
            raise ConfigError(f"grid resolution {self.resolution} too small")
        if self.dx is not None and self.dx <= 0:
            raise ConfigError("grid spacing dx must be positive")


class Grid:
    """Node mass and momentum; ``grid_update`` turns momentum into velocity in place."""

    def __init__(self, resolution, dx, origin, boundary_cells=3, ground_height=None):
        self.resolution = tuple(int(r) for r in resolution)
        self.dx = float(dx)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.boundary_cells = int(boundary_cells)
        self.ground_height = ground_height
        self.mass = np.zeros(self.resolution)
        self.momentum = np.zeros(self.resolution + (3,))
        self.active = (np.zeros(3, np.int64), np.zeros(3, np.int64))

    @property
    def velocity(self) -> np.ndarray:
        return self.momentum

    def _box(self):
        lo, hi = self.active
        return tuple(slice(a, b) for a, b in zip(lo, hi))

    def clear(self):
        box = self._box()
        self.mass[box] = 0.0
        self.momentum[box] = 0.0

    def node_positions(self, lo, hi) -> np.ndarray:
        axes = [self.origin[a] + self.dx * np.arange(lo[a], hi[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1)

    def as_dict(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "dx": self.dx,
            "origin": self.origin.tolist(),
            "boundary_cells": self.boundary_cells,
            "ground_height": self.ground_height,
        }


@dataclasses.dataclass
class SimState:
    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    mass: np.ndarray
    volume: np.ndarray
    material_index: np.ndarray
    gaussian_index: np.ndarray
    materials: tuple
    grid: Grid
    dt: float
    gravity: np.ndarray
    step_count: int = 0
    time: float = 0.0

    def __post_init__(self):
        self.mu = np.array([m.mu for m in self.materials])[self.material_index] if len(self.materials) else np.zeros(0)
        self.lam = np.array([m.lam for m in self.materials])[self.material_index] if len(self.materials) else np.zeros(0)

    @property
    def n_particles(self) -> int:
        return self.x.shape[0]

    def momentum(self) -> np.ndarray:
        return (self.mass[:, None] * self.v).sum(axis=0)


def init_sim(scene: GaussianScene, materials: dict, grid_cfg: GridConfig | None = None,
             dt: float = 1e-4, gravity=(0.0, 0.0, -9.8), include_background: bool = False) -> SimState:
    """One particle per simulated Gaussian (background id 0 excluded by default)."""
    grid_cfg = grid_cfg or GridConfig()
    if scene.object_ids is None:
        raise ConfigError("scene has no object ids; segment it first")
    ids = scene.object_ids
    sim = np.ones(len(scene), bool) if include_background else ids != 0
    present = sorted(int(i) for i in np.unique(ids[sim]))
    missing = [i for i in present if i not in materials]
    if missing:
        raise ConfigError(f"no material configured for object ids {missing}")
    if dt <= 0:
        raise ConfigError("dt must be positive")

    gidx = np.flatnonzero(sim)
    x = scene.means[gidx].astype(np.float64)
    mats = tuple(materials[i] for i in present)
    mat_index = np.searchsorted(present, ids[gidx]).astype(np.int64)

    res = np.asarray(grid_cfg.resolution)
    if len(x):
        lo, hi = x.min(axis=0), x.max(axis=0)
    else:
        lo = hi = np.zeros(3)
    dx = grid_cfg.dx
    if dx is None:
        dx = 2.0 * max(float((hi - lo).max()), 1e-6) / float(res.min())
    origin = grid_cfg.origin
    if origin is None:
        origin = 0.5 * (lo + hi) - 0.5 * (res - 1) * dx
    grid = Grid(res, dx, origin, grid_cfg.boundary_cells, grid_cfg.ground_height)

    n = len(gidx)
    volume = np.zeros(n)
    cells = np.floor((x - grid.origin) / dx).astype(np.int64)
    for k in range(len(mats)):
        sel = mat_index == k
        occupied = len(np.unique(cells[sel], axis=0))
        volume[sel] = dx**3 * occupied / sel.sum()
    density = np.array([m.density for m in mats])[mat_index] if n else np.zeros(0)
    v = np.array([m.initial_velocity for m in mats])[mat_index] if n else np.zeros((0, 3))

    state = SimState(
        x=x,
        v=v.astype(np.float64),
        F=np.tile(np.eye(3), (n, 1, 1)),
        C=np.zeros((n, 3, 3)),
        mass=density * volume,
        volume=volume,
        material_index=mat_index,
        gaussian_index=gidx.astype(np.int64),
        materials=mats,
        grid=grid,
        dt=float(dt),
        gravity=np.asarray(gravity, dtype=np.float64),
    )
    check_inside(state)
    for m in mats:
        limit = 0.1 * dx / m.wave_speed
        if dt > limit:
            log.warning("dt=%.3g exceeds the CFL guidance %.3g for E=%.3g, rho=%.3g",
                        dt, limit, m.youngs_modulus, m.density)
    return state


def check_inside(state: SimState) -> None:
    """Raise if any particle's 3x3x3 stencil leaves the grid."""
    g = state.grid
    base = np.floor((state.x - g.origin) / g.dx - 0.5)
    bad = (base < 0) | (base + 2 > np.asarray(g.resolution) - 1) | ~np.isfinite(base)
    if bad.any():
        p = int(np.flatnonzero(bad.any(axis=1))[0])
        raise SimulationError(
            f"particle {p} at {state.x[p].tolist()} is outside the grid interior "
            f"(step {state.step_count})"
        )


# --- constitutive model ----------------------------------------------------


def piola_kirchhoff(F, material: Material) -> np.ndarray:
    """First Piola-Kirchhoff stress ∂Ψ/∂F for one (3,3) or a batch (N,3,3) of F."""
    F = np.asarray(F, dtype=np.float64)
    P = fixed_corotated(F, material.mu, material.lam)[0]
    return P.reshape(F.shape)


def energy_density(F, material: Material) -> np.ndarray:
    """Ψ(F) = μ Σ(σ_i - 1)² + λ/2 (J - 1)²."""
    F = np.asarray(F, dtype=np.float64)
    _, sig, _ = proper_svd(F.reshape(-1, 3, 3))
    J = sig.prod(axis=1)
    psi = material.mu * ((sig - 1.0) ** 2).sum(axis=1) + 0.5 * material.lam * (J - 1.0) ** 2
    return psi.reshape(F.shape[:-2])


# --- transfers -------------------------------------------------------------


def p2g(state: SimState, dt: float | None = None, backend=None) -> Grid:
    """Scatter mass, APIC momentum and the MLS force impulse to the grid."""
    dt = state.dt if dt is None else dt
    grid = state.grid
    check_inside(state)
    inv_w = 4.0 / (grid.dx * grid.dx)
    # clamped elements have their F projected in place
    affine, clamped = kernels.stress_affine(state.F, state.C, state.mass, state.volume, state.mu,
                                            state.lam, dt, inv_w, backend=backend)
    if clamped.any():
        log.debug("step %d: %d inverted/degenerate elements projected", state.step_count, clamped.sum())
    grid.clear()
    if state.n_particles:
        base = np.floor((state.x - grid.origin) / grid.dx - 0.5).astype(np.int64)
        grid.active = (base.min(axis=0), base.max(axis=0) + 3)
    else:
        grid.active = (np.zeros(3, np.int64), np.zeros(3, np.int64))
    kernels.p2g(state.x, state.v, state.mass, affine, grid.origin, grid.dx, grid.mass,
                grid.momentum, backend=backend)
    return grid


def grid_update(grid: Grid, dt: float, gravity, boundary_cells: int | None = None,
                ground_height: float | None = None) -> Grid:
    """Momentum -> velocity plus gravity; separate-type boundary conditions."""
    box = grid._box()
    m = grid.mass[box]
    mv = grid.momentum[box]
    has_mass = m > 0
    vel = np.zeros_like(mv)
    vel[has_mass] = mv[has_mass] / m[has_mass, None] + dt * np.asarray(gravity)
    b = grid.boundary_cells if boundary_cells is None else boundary_cells
    lo, hi = grid.active
    for a in range(3):
        idx = np.arange(lo[a], hi[a])
        shape = [1, 1, 1]
        shape[a] = -1
        low = (idx < b).reshape(shape)
        high = (idx > grid.resolution[a] - 1 - b).reshape(shape)
        va = vel[..., a]
        va[low & (va < 0)] = 0.0
        va[high & (va > 0)] = 0.0
    ground = grid.ground_height if ground_height is None else ground_height
    if ground is not None:
        z = (grid.origin[2] + grid.dx * np.arange(lo[2], hi[2])).reshape(1, 1, -1)
        vz = vel[..., 2]
        vz[(z <= ground) & (vz < 0)] = 0.0
    grid.momentum[box] = vel
    return grid


def g2p(state: SimState, dt: float | None = None, backend=None) -> SimState:
    """Gather velocity and affine field; update F and advect particles."""
    dt = state.dt if dt is None else dt
    grid = state.grid
    v, C = kernels.g2p(grid.velocity, grid.origin, grid.dx, state.x, backend=backend)
    F = state.F + dt * (C @ state.F)
    x = state.x + dt * v
    bad = ~(np.isfinite(x).all(axis=1) & np.isfinite(v).all(axis=1) & np.isfinite(F).all(axis=(1, 2)))
    if bad.any():
        p = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite state at step {state.step_count} for particle {p}",
                             step=state.step_count, particle=p)
    state.v, state.C, state.F, state.x = v, C, F, x
    return state


def step(state: SimState, dt: float | None = None, hook: Callable | None = None,
         backend=None) -> SimState:
    dt = state.dt if dt is None else dt
    p2g(state, dt, backend=backend)
    grid_update(state.grid, dt, state.gravity)
    g2p(state, dt, backend=backend)
    state.step_count += 1
    state.time += dt
    if hook is not None:
        hook(state)
    return state


def simulate(state: SimState, n_steps: int, frame_stride: int = 1,
             on_frame: Callable | None = None, backend=None) -> SimState:
    """Advance ``n_steps``; ``on_frame(frame, state)`` runs at step 0 and every stride."""
    if on_frame is not None:
        on_frame(0, state)
    for k in range(1, n_steps + 1):
        step(state, backend=backend)
        if on_frame is not None and k % frame_stride == 0:
            on_frame(k // frame_stride, state)
    return state


# --- files -----------------------------------------------------------------


def savez_stable(path, **arrays) -> None:
    """np.savez with fixed zip timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)


def save_checkpoint(state: SimState, path) -> None:
    meta = {
        "step": state.step_count,
        "time": state.time,
        "dt": state.dt,
        "gravity": state.gravity.tolist(),
        "grid": state.grid.as_dict(),
        "materials": [dataclasses.asdict(m) for m in state.materials],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    savez_stable(tmp, x=state.x, v=state.v, F=state.F, C=state.C, mass=state.mass,
             volume=state.volume, material_index=state.material_index,
             gaussian_index=state.gaussian_index, meta=np.array(json.dumps(meta)))
    tmp.replace(path)


def load_checkpoint(path) -> SimState:
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        g = meta["grid"]
        grid = Grid(g["resolution"], g["dx"], g["origin"], g["boundary_cells"], g["ground_height"])
        return SimState(
            x=data["x"], v=data["v"], F=data["F"], C=data["C"], mass=data["mass"],
            volume=data["volume"], material_index=data["material_index"],
            gaussian_index=data["gaussian_index"],
            materials=tuple(Material(**m) for m in meta["materials"]),
            grid=grid, dt=meta["dt"], gravity=np.asarray(meta["gravity"]),
            step_count=meta["step"], time=meta["time"],
        )


def save_frame(state: SimState, path) -> None:
    """Per-frame export consumed by the kinematics stage."""
    savez_stable(path, x=state.x, F=state.F, gaussian_index=state.gaussian_index,
             step=state.step_count, time=state.time)


def load_frame(path) -> dict:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
