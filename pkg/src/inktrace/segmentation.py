"""Sheet segmentation by per-slice particle chains propagated along z.

A chain is an ordered run of (x, y) particles in one z-slice.  Propagation
to the next slice minimizes a discrete energy balancing image brightness
against bending and stretching:

    E = sum_i [ -I(p_i) + alpha * ||p_{i-1} - 2 p_i + p_{i+1}||^2
                + beta * (||p_i - p_{i+1}|| - spacing)^2 ]

with I normalized to [0, 1].  Updates are sequential coordinate descent
over a fixed integer candidate window per particle, so every sweep can
only lower E.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from .mesh import SurfaceMesh, grid_mesh
from .volume import OutOfBoundsError, VoxelGrid, trilinear


class LostSurfaceError(Exception):
    """The chain fell below the minimum tracking intensity."""


class TraceError(Exception):
    """Propagation aborted partway through a trace."""

    def __init__(self, message: str, rows_completed: int):
        super().__init__(message)
        self.rows_completed = rows_completed


@dataclass
class TraceParams:
    step_dz: float = 1.0
    search_radius: int = 3
    alpha: float = 0.3          # bending stiffness
    beta: float = 0.1           # stretch toward the chain spacing
    relax_iters: int = 3
    min_intensity: float = 0.15

    def __post_init__(self):
        if self.step_dz <= 0:
            raise ValueError("step_dz must be positive")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")
        if self.relax_iters < 0:
            raise ValueError("relax_iters must be >= 0")
        if not 0.0 <= self.min_intensity <= 1.0:
            raise ValueError("min_intensity must be in [0, 1]")


@dataclass
class ParticleChain:
    """Ordered particles in one slice; points are (n, 2) float (x, y)."""

    z: float
    points: np.ndarray
    spacing: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (n, 2), got {self.points.shape}")
        if len(self.points) < 2:
            raise ValueError("a chain needs at least 2 particles")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")


def _arc_lengths(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Uniform arc-length resampling; endpoints are kept exactly."""
    points = np.asarray(points, dtype=np.float64)
    arc = _arc_lengths(points)
    total = arc[-1]
    if total <= 0:
        raise ValueError("polyline has zero length")
    n = max(2, int(round(total / spacing)) + 1)
    return _resample_to_count(points, n, arc)


def _resample_to_count(points: np.ndarray, n: int,
                       arc: np.ndarray | None = None) -> np.ndarray:
    if arc is None:
        arc = _arc_lengths(points)
    targets = np.linspace(0.0, arc[-1], n)
    out = np.column_stack([np.interp(targets, arc, points[:, 0]),
                           np.interp(targets, arc, points[:, 1])])
    out[0] = points[0]
    out[-1] = points[-1]
    return out


def seed_chain(grid: VoxelGrid, z: float, seeds, spacing: float) -> ParticleChain:
    """Resample a hand-placed polyline of seed points into a chain."""
    seeds = np.asarray(seeds, dtype=np.float64)
    if seeds.ndim != 2 or seeds.shape[1] != 2 or len(seeds) < 2:
        raise ValueError(f"need >= 2 seed points (x, y), got shape {seeds.shape}")
    nx, ny, nz = grid.dims
    if not 0 <= z <= nz - 1:
        raise OutOfBoundsError(f"seed slice z={z} outside [0, {nz - 1}]")
    if (seeds[:, 0].min() < 0 or seeds[:, 0].max() > nx - 1
            or seeds[:, 1].min() < 0 or seeds[:, 1].max() > ny - 1):
        raise OutOfBoundsError("seed points outside the slice")
    return ParticleChain(z=z, points=resample_polyline(seeds, spacing),
                         spacing=spacing)


def _candidate_offsets(radius: int) -> np.ndarray:
    """Integer offsets of the (2r+1)^2 window, nearest first so ties keep
    the particle in place."""
    d = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(d, d)
    offs = np.column_stack([dx.ravel(), dy.ravel()]).astype(np.float64)
    order = np.lexsort((offs[:, 0], offs[:, 1],
                        (offs ** 2).sum(axis=1)))
    return offs[order]


def chain_energy(grid: VoxelGrid, points: np.ndarray, z: float,
                 spacing: float, params: TraceParams) -> float:
    """The full objective at the given particle positions."""
    pts3 = np.column_stack([points, np.full(len(points), z)])
    vals, inside = trilinear(grid.data, pts3)
    if not inside.all():
        raise OutOfBoundsError("chain exits the slice")
    intensity = vals / 65535.0
    bend = np.zeros(len(points))
    bend[1:-1] = ((points[:-2] - 2.0 * points[1:-1] + points[2:]) ** 2
                  ).sum(axis=1)
    stretch = (np.linalg.norm(np.diff(points, axis=0), axis=1) - spacing) ** 2
    return float(-intensity.sum() + params.alpha * bend.sum()
                 + params.beta * stretch.sum())


def propagate_chain(grid: VoxelGrid, chain: ParticleChain,
                    params: TraceParams,
                    check_energy: bool = False) -> ParticleChain:
    """Advance the chain by ``step_dz`` and relax it onto the sheet.

    Runs ``1 + relax_iters`` sequential sweeps; each particle takes the
    best candidate in its window given current neighbor positions.  Raises
    LostSurfaceError when any chosen candidate is dimmer than
    ``min_intensity``, OutOfBoundsError when the chain leaves the slice.
    """
    nx, ny, nz = grid.dims
    new_z = chain.z + params.step_dz
    if not 0 <= new_z <= nz - 1:
        raise OutOfBoundsError(f"slice z={new_z} outside [0, {nz - 1}]")

    n = len(chain.points)

    # Phase 1: each particle slides along its local sheet normal to the
    # intensity-weighted centroid of the samples there.  A collective move
    # is free here, which is what lets the chain follow a drifting sheet
    # (under the full energy the first mover always pays the bending cost
    # and the chain stalls).  The tangential direction is excluded so
    # bright fiber texture along the sheet cannot drag particles sideways,
    # and the centroid averages voxel noise that an argmax would amplify.
    # Tangents are smoothed along the chain before taking normals: a raw
    # per-particle tangent wobbles with every kink, tilting the ray into
    # the fiber texture and feeding the kink back on itself.
    tang = np.gradient(chain.points, axis=0)
    tang = uniform_filter1d(tang, size=min(7, n), axis=0, mode="nearest")
    tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-12)
    normal = np.column_stack([-tang[:, 1], tang[:, 0]])
    r = params.search_radius
    js = np.arange(-r, r + 1, dtype=float)
    cand_n = chain.points[:, None, :] + js[None, :, None] * normal[:, None, :]
    pts3 = np.concatenate([cand_n.reshape(-1, 2),
                           np.full((n * len(js), 1), new_z)], axis=1)
    vals, inside_n = trilinear(grid.data, pts3)
    inside_n = inside_n.reshape(n, -1)
    if not inside_n.any(axis=1).all():
        bad = int(np.flatnonzero(~inside_n.any(axis=1))[0])
        raise OutOfBoundsError(
            f"particle {bad} has no in-bounds candidate at z={new_z}")
    weight = np.where(inside_n, vals.reshape(n, -1) / 65535.0, 0.0)
    mass = weight.sum(axis=1)
    shift = np.where(mass > 1e-12, (weight * js).sum(axis=1) / np.maximum(
        mass, 1e-12), 0.0)
    pos = chain.points + shift[:, None] * normal

    # Phase 2: coordinate descent on the full energy over an integer
    # window around the snapped positions smooths outliers (noise maxima)
    # back toward their neighbors.
    offs = _candidate_offsets(params.search_radius)
    c = len(offs)
    cand = pos[:, None, :] + offs[None, :, :]                   # (n, c, 2)
    pts3 = np.concatenate([cand.reshape(-1, 2),
                           np.full((n * c, 1), new_z)], axis=1)
    vals, inside = trilinear(grid.data, pts3)
    intensity = (vals / 65535.0).reshape(n, c)
    inside = inside.reshape(n, c)
    data_cost = np.where(inside, -intensity, np.inf)
    chosen = np.zeros(n, dtype=np.intp)                          # offset (0,0)
    a, b, s = params.alpha, params.beta, chain.spacing
    energies = []
    if check_energy:
        energies.append(chain_energy(grid, pos, new_z, s, params))
    for _ in range(params.relax_iters):
        for i in range(n):
            ci = cand[i]                                         # (c, 2)
            cost = data_cost[i].copy()
            if 0 < i < n - 1:
                cost += a * ((pos[i - 1] - 2.0 * ci + pos[i + 1]) ** 2
                             ).sum(axis=1)
            if i >= 2:
                cost += a * ((pos[i - 2] - 2.0 * pos[i - 1] + ci) ** 2
                             ).sum(axis=1)
            if i <= n - 3:
                cost += a * ((ci - 2.0 * pos[i + 1] + pos[i + 2]) ** 2
                             ).sum(axis=1)
            if i >= 1:
                cost += b * (np.linalg.norm(ci - pos[i - 1], axis=1) - s) ** 2
            if i <= n - 2:
                cost += b * (np.linalg.norm(ci - pos[i + 1], axis=1) - s) ** 2
            chosen[i] = np.argmin(cost)
            pos[i] = ci[chosen[i]]
        if check_energy:
            energies.append(chain_energy(grid, pos, new_z, s, params))

    if check_energy and len(energies) > 1:
        diffs = np.diff(energies)
        if (diffs > 1e-9).any():
            raise AssertionError(f"relaxation increased energy: {energies}")

    chosen_i = intensity[np.arange(n), chosen]
    if (chosen_i < params.min_intensity).any():
        dim = int(np.argmin(chosen_i))
        raise LostSurfaceError(
            f"particle {dim} intensity {chosen_i[dim]:.3f} < "
            f"min_intensity {params.min_intensity} at z={new_z}")

    return ParticleChain(z=new_z, points=resample_polyline(pos, s),
                         spacing=s)


def trace_surface(grid: VoxelGrid, chain: ParticleChain, z1: float,
                  params: TraceParams | None = None,
                  check_energy: bool = False) -> SurfaceMesh:
    """Stack propagated chains from ``chain.z`` up to ``z1`` into a mesh.

    Chains are resampled to a common point count, so the result is a
    rows x cols vertex grid triangulated as a strip.  A propagation
    failure raises TraceError carrying the number of completed rows.
    """
    params = params or TraceParams()
    if z1 <= chain.z:
        raise ValueError(f"z1 ({z1}) must exceed the seed slice ({chain.z})")
    steps = int(np.floor((z1 - chain.z) / params.step_dz + 1e-9))
    chains = [chain]
    for _ in range(steps):
        try:
            chain = propagate_chain(grid, chain, params,
                                    check_energy=check_energy)
        except (LostSurfaceError, OutOfBoundsError) as err:
            raise TraceError(
                f"trace aborted after {len(chains)} rows "
                f"(z={chain.z:g}): {err}", rows_completed=len(chains)
            ) from err
        chains.append(chain)

    cols = max(len(c.points) for c in chains)
    verts = np.concatenate([
        np.column_stack([_resample_to_count(c.points, cols),
                         np.full(cols, c.z)]) for c in chains])
    return grid_mesh(verts, rows=len(chains), cols=cols)
