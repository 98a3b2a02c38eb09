"""Voxel grids, slice-stack I/O, quantization, slab merging, and resampling.

Volumes are stored as 16-bit unsigned grids in z-major slice order:
``data[z, y, x]`` with logical dims reported as ``(nx, ny, nz)``.  All
sampling coordinates are voxel-space ``(x, y, z)`` with the voxel centers on
the integer lattice.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class OutOfBoundsError(Exception):
    """A sample coordinate fell outside the voxel lattice."""


_SLICE_RE = re.compile(r"^(\d{4})\.tif$")
_16BIT_MODES = ("I;16", "I;16B", "I;16L", "I;16N")


@dataclass
class VoxelGrid:
    """A 16-bit scalar volume with isotropic voxel size in micrometers.

    data : np.ndarray
        uint16 array of shape ``(nz, ny, nx)``.  Marked read-only on
        construction; grids are safe to share across worker threads.
    voxel_size : float
        Edge length of a voxel in micrometers.
    meta : dict
        Provenance strings (intensity window, energy, seed, source).
    """

    data: np.ndarray
    voxel_size: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected 3D data, got shape {self.data.shape}")
        if self.data.dtype != np.uint16:
            raise ValueError(f"expected uint16 data, got {self.data.dtype}")
        if min(self.data.shape) < 1:
            raise ValueError(f"degenerate dims {self.data.shape}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        self.data.flags.writeable = False

    @property
    def dims(self) -> tuple[int, int, int]:
        """Logical dims ``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)


@dataclass(frozen=True)
class IntensityWindow:
    """Linear float-to-uint16 mapping window; values clamp to ``[lo, hi]``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window requires lo < hi, got [{self.lo}, {self.hi}]")


@dataclass
class Slab:
    """A contiguous z-run of slices positioned inside a larger volume."""

    grid: VoxelGrid
    z_offset: int

    def __post_init__(self):
        if self.z_offset < 0:
            raise ValueError(f"z_offset must be >= 0, got {self.z_offset}")


def quantize(values: np.ndarray, window: IntensityWindow, voxel_size: float,
             meta: dict | None = None) -> VoxelGrid:
    """Map a float volume through ``window`` onto the full uint16 range.

    ``v -> round((clamp(v, lo, hi) - lo) / (hi - lo) * 65535)`` with ties
    rounded half-to-even.
    """
    values = np.asarray(values, dtype=np.float64)
    scaled = (np.clip(values, window.lo, window.hi) - window.lo) * (
        65535.0 / (window.hi - window.lo))
    data = np.rint(scaled).astype(np.uint16)
    out_meta = dict(meta) if meta else {}
    out_meta.setdefault("window_lo", window.lo)
    out_meta.setdefault("window_hi", window.hi)
    return VoxelGrid(data=data, voxel_size=voxel_size, meta=out_meta)


def dequantize(data: np.ndarray, window: IntensityWindow) -> np.ndarray:
    """Inverse of :func:`quantize` up to the quantization step."""
    return window.lo + data.astype(np.float64) * ((window.hi - window.lo) / 65535.0)


def merge_slabs(slabs: list[Slab]) -> VoxelGrid:
    """Fuse overlapping z-slabs into one volume with linear cross-fades.

    Slabs must be sorted by ``z_offset``, agree on (nx, ny) and voxel size,
    and leave no uncovered slices.  Where consecutive slabs overlap by n
    slices the upper slab's weight ramps ``1/(n+1) .. n/(n+1)`` so neither
    endpoint slice is discarded outright.
    """
    if not slabs:
        raise ValueError("no slabs to merge")
    first = slabs[0].grid
    ny, nx = first.data.shape[1:]
    for i, s in enumerate(slabs):
        if s.grid.data.shape[1:] != (ny, nx):
            raise ValueError(
                f"slab {i} cross-section {s.grid.data.shape[1:]} != {(ny, nx)}")
        if s.grid.voxel_size != first.voxel_size:
            raise ValueError(
                f"slab {i} voxel_size {s.grid.voxel_size} != {first.voxel_size}")
        if i and s.z_offset < slabs[i - 1].z_offset:
            raise ValueError("slabs must be sorted by z_offset")
    if slabs[0].z_offset != 0:
        raise ValueError(f"uncovered slices [0, {slabs[0].z_offset})")

    nz = max(s.z_offset + s.grid.data.shape[0] for s in slabs)
    out = np.zeros((nz, ny, nx), dtype=np.float64)
    covered = 0  # slices [0, covered) are final
    for i, s in enumerate(slabs):
        lo = s.z_offset
        hi = lo + s.grid.data.shape[0]
        if lo > covered:
            raise ValueError(f"uncovered slices [{covered}, {lo})")
        new = s.grid.data.astype(np.float64)
        n_overlap = min(covered, hi) - lo
        if n_overlap > 0:
            w = (np.arange(1, n_overlap + 1) / (n_overlap + 1.0))[:, None, None]
            out[lo:lo + n_overlap] = (
                (1.0 - w) * out[lo:lo + n_overlap] + w * new[:n_overlap])
        out[covered:hi] = new[covered - lo:]
        covered = max(covered, hi)

    meta = dict(first.meta)
    meta["merged_slabs"] = len(slabs)
    return VoxelGrid(data=np.rint(out).astype(np.uint16),
                     voxel_size=first.voxel_size, meta=meta)


def trilinear(data: np.ndarray, pts: np.ndarray,
              fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear interpolation of ``data[z, y, x]`` at ``pts[..., (x, y, z)]``.

    Returns ``(values, inside)``; out-of-lattice points take ``fill`` and
    ``inside`` False.  Exact at lattice points.
    """
    pts = np.asarray(pts, dtype=np.float64)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    nz, ny, nx = data.shape
    inside = ((x >= 0) & (x <= nx - 1) & (y >= 0) & (y <= ny - 1)
              & (z >= 0) & (z <= nz - 1))
    xc = np.where(inside, x, 0.0)
    yc = np.where(inside, y, 0.0)
    zc = np.where(inside, z, 0.0)
    # Clamp the base index so coordinates exactly on the far face still have
    # a full cell; the fractional weight becomes 1 there.
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(nx - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(ny - 2, 0))
    z0 = np.minimum(np.floor(zc).astype(np.intp), max(nz - 2, 0))
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = xc - x0
    fy = yc - y0
    fz = zc - z0
    d = data
    c00 = d[z0, y0, x0] * (1 - fx) + d[z0, y0, x1] * fx
    c01 = d[z0, y1, x0] * (1 - fx) + d[z0, y1, x1] * fx
    c10 = d[z1, y0, x0] * (1 - fx) + d[z1, y0, x1] * fx
    c11 = d[z1, y1, x0] * (1 - fx) + d[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    vals = c0 * (1 - fz) + c1 * fz
    return np.where(inside, vals, fill), inside


def sample_trilinear(grid: VoxelGrid, p) -> float:
    """Interpolate one point ``(x, y, z)``; raises OutOfBoundsError outside."""
    val, inside = trilinear(grid.data, np.asarray(p, dtype=np.float64))
    if not bool(inside):
        raise OutOfBoundsError(f"point {tuple(p)} outside dims {grid.dims}")
    return float(val)


def extract_oriented_patch(grid: VoxelGrid, center, basis, shape,
                           spacing: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Resample an oriented box of samples around ``center``.

    ``basis`` is a 3x3 matrix whose columns are the patch axes in volume
    space (orthonormal within 1e-6).  ``patch[i, j, k]`` samples at
    ``center + basis @ ((i - w//2)*s, (j - h//2)*s, (k - d//2)*s)``.
    Out-of-volume samples are zero with the validity mask cleared.
    """
    basis = np.asarray(basis, dtype=np.float64)
    if basis.shape != (3, 3):
        raise ValueError(f"basis must be 3x3, got {basis.shape}")
    dev = np.abs(basis.T @ basis - np.eye(3)).max()
    if dev > 1e-6:
        raise ValueError(f"basis not orthonormal (max deviation {dev:.3g})")
    w, h, d = shape
    if min(w, h, d) < 1:
        raise ValueError(f"degenerate patch shape {shape}")
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    offs = np.stack(np.meshgrid(
        (np.arange(w) - w // 2) * spacing,
        (np.arange(h) - h // 2) * spacing,
        (np.arange(d) - d // 2) * spacing,
        indexing="ij"), axis=-1)
    pts = np.asarray(center, dtype=np.float64) + offs @ basis.T
    vals, inside = trilinear(grid.data, pts)
    return vals, inside


def save_slice_stack(grid: VoxelGrid, path) -> list[Path]:
    """Write ``NNNN.tif`` 16-bit slices plus ``meta.json``; returns paths."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for z in range(grid.data.shape[0]):
        p = path / f"{z:04d}.tif"
        Image.fromarray(np.ascontiguousarray(grid.data[z])).save(p)
        written.append(p)
    meta = {"voxel_size_um": grid.voxel_size}
    for k, v in grid.meta.items():
        meta.setdefault(k, v)
    mp = path / "meta.json"
    mp.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    written.append(mp)
    return written


def load_slice_stack(path) -> VoxelGrid:
    """Read a ``NNNN.tif`` stack written by :func:`save_slice_stack`."""
    path = Path(path)
    entries = []
    for p in path.iterdir():
        m = _SLICE_RE.match(p.name)
        if m:
            entries.append((int(m.group(1)), p))
    if not entries:
        raise ValueError(f"no NNNN.tif slices in {path}")
    entries.sort()
    indices = [i for i, _ in entries]
    lo = indices[0]
    for want, got in enumerate(indices):
        if got != lo + want:
            raise ValueError(
                f"gap in slice index sequence: expected {lo + want:04d}, "
                f"found {got:04d}")

    slices = []
    for _, p in entries:
        img = Image.open(p)
        if img.mode not in _16BIT_MODES:
            raise ValueError(f"{p.name}: not a 16-bit grayscale image "
                             f"(mode {img.mode})")
        arr = np.asarray(img, dtype=np.uint16)
        if slices and arr.shape != slices[0].shape:
            raise ValueError(f"{p.name}: slice dims {arr.shape} != "
                             f"{slices[0].shape}")
        slices.append(arr)

    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise ValueError(f"missing meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    if "voxel_size_um" not in meta:
        raise ValueError("meta.json missing required key voxel_size_um")
    voxel_size = float(meta.pop("voxel_size_um"))
    return VoxelGrid(data=np.stack(slices), voxel_size=voxel_size, meta=meta)


def save_float_grid(values: np.ndarray, path) -> None:
    """Raw little-endian float32 dump with dims sidecar (test fixtures)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype="<f4")
    (path / "volume.f32").write_bytes(values.tobytes(order="C"))
    nz, ny, nx = values.shape
    (path / "meta.json").write_text(json.dumps(
        {"dims": [nx, ny, nz], "dtype": "<f4"}, sort_keys=True) + "\n")


def load_float_grid(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    nx, ny, nz = meta["dims"]
    raw = np.frombuffer((path / "volume.f32").read_bytes(), dtype="<f4")
    if raw.size != nx * ny * nz:
        raise ValueError(f"float grid size {raw.size} != dims product "
                         f"{nx * ny * nz}")
    return raw.reshape(nz, ny, nx).astype(np.float64)
