"""Synthetic CT phantoms of papyrus sheets with known ink ground truth.

Fragments are stacks of gently warped sheets, height fields ``y(x, z)``
so that per-slice chain tracing sees a curve per z-slice.  Scrolls are
Archimedean spirals in the (x, y) plane extruded along z.  Papyrus gets a
crossed sinusoidal fiber texture, a through-thickness density profile, and
seeded Gaussian noise; ink occupies a thin band under the top face and is
rendered either as added intensity or as fiber suppression at unchanged
mean intensity (texture-only signal).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import glyphs
from .mesh import SurfaceMesh, grid_mesh, save_obj
from .volume import IntensityWindow, VoxelGrid, quantize, save_slice_stack

PAPYRUS_BASE = 0.55  # air is 0; full scale is 1 before quantization


@dataclass
class PhantomSpec:
    """Parameters of a synthetic scan. Lengths in micrometers."""

    kind: str = "fragment"          # "fragment" | "scroll"
    wraps: int = 5                  # scroll only
    spiral_pitch: float = 120.0     # scroll only, radial advance per turn
    sheet_thickness: float = 60.0
    fiber_period: float = 28.0
    fiber_amplitude: float = 0.4    # relative modulation of the base intensity
    ink_text: str = "NOY"
    ink_mode: str = "morphology"    # "intensity" | "morphology"
    ink_strength: float = 0.12      # intensity mode: added relative intensity
    noise_sigma: float = 0.02
    layer_count: int = 2            # fragment only
    warp_amplitude: float = 8.0    # fragment only
    voxel_size: float = 4.0
    seed: int = 0
    # Desk-scale extent and rendering knobs (voxels / pixels).
    size_x: int = 256
    size_z: int = 256
    ink_depth: float = 8.0          # um, thickness of the ink band
    core_boost: float = 0.25        # density peak at the sheet center
    glyph_cell_w: int = 45
    glyph_cell_h: int = 63

    def __post_init__(self):
        if self.kind not in ("fragment", "scroll"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.ink_mode not in ("intensity", "morphology"):
            raise ValueError(f"unknown ink_mode {self.ink_mode!r}")
        for name in ("sheet_thickness", "fiber_period", "voxel_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("fiber_amplitude", "ink_strength", "noise_sigma",
                     "warp_amplitude", "ink_depth", "core_boost"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.wraps < 1:
            raise ValueError("wraps must be >= 1")
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if min(self.size_x, self.size_z) < 16:
            raise ValueError("size_x and size_z must be >= 16 voxels")


@dataclass
class GroundTruth:
    """What the generator knows: geometry, per-layer ink, provenance."""

    true_mesh: SurfaceMesh                 # the surface the pipeline traces
    ink_mask: list[np.ndarray]             # per layer, UV raster, bool
    provenance: dict
    layer_meshes: list[SurfaceMesh] = field(default_factory=list)
    voxel_ink: np.ndarray | None = None    # voxel-space cross-check mask


@dataclass
class SurfacePhoto:
    """Infrared-style surface image of layer 0; dark pixels are ink.

    ``applied_transform`` is the 2x3 affine taking photo pixel (x, y) to
    the layer's analytic UV frame.
    """

    image: np.ndarray
    applied_transform: np.ndarray


def render_glyph_mask(text: str, cell: tuple[int, int] = (40, 56)) -> np.ndarray:
    """Rasterize text as dot-matrix glyphs, one per fixed-size cell.

    Glyph dots scale by the largest integer factor the cell allows and the
    scaled block is centered in its cell.  Returns bool (cell_h, n*cell_w).
    """
    w, h = cell
    if w < glyphs.GLYPH_W or h < glyphs.GLYPH_H:
        raise ValueError(f"cell {cell} smaller than glyph "
                         f"{(glyphs.GLYPH_W, glyphs.GLYPH_H)}")
    out = np.zeros((h, len(text) * w), dtype=bool)
    s = min(w // glyphs.GLYPH_W, h // glyphs.GLYPH_H)
    x0 = (w - glyphs.GLYPH_W * s) // 2
    y0 = (h - glyphs.GLYPH_H * s) // 2
    for i, ch in enumerate(text):
        block = np.kron(glyphs.glyph_array(ch), np.ones((s, s), dtype=bool))
        out[y0:y0 + block.shape[0], i * w + x0:i * w + x0 + block.shape[1]] = block
    return out


def _warp_field(rng: np.random.Generator, nx: int, nz: int,
                amp_vox: float) -> np.ndarray:
    """Smooth low-frequency height perturbation, max abs = amp_vox."""
    xx = np.arange(nx)
    zz = np.arange(nz)
    w = np.zeros((nz, nx))
    for _ in range(3):
        wavelength = rng.uniform(0.5, 1.0) * max(nx, nz)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        coeff = rng.uniform(0.5, 1.0)
        k = 2.0 * np.pi / wavelength
        w += coeff * np.sin(k * (np.cos(ang) * xx[None, :]
                                 + np.sin(ang) * zz[:, None]) + phase)
    if amp_vox == 0.0:
        return np.zeros((nz, nx))
    return w * (amp_vox / max(np.abs(w).max(), 1e-12))


def _fiber_phases(rng: np.random.Generator) -> tuple[float, float]:
    return tuple(rng.uniform(0.0, 2.0 * np.pi, size=2))


def _crossed_fibers(u: np.ndarray, v: np.ndarray, period_vox: float,
                    phases: tuple[float, float]) -> np.ndarray:
    """Two perpendicular fiber directions, each a sinusoid; range [-1, 1]."""
    k = 2.0 * np.pi / period_vox
    return 0.5 * (np.sin(k * u + phases[0]) + np.sin(k * v + phases[1]))


def _random_affine(rng: np.random.Generator, dims: tuple[int, int]) -> np.ndarray:
    """Small photo->UV perturbation: |rot| <= 5 deg, |scale-1| <= 3%,
    |translation| <= 10 px, about the image center."""
    ang = np.deg2rad(rng.uniform(-5.0, 5.0))
    s = rng.uniform(0.97, 1.03)
    t = rng.uniform(-10.0, 10.0, size=2)
    m = s * np.array([[np.cos(ang), -np.sin(ang)],
                      [np.sin(ang), np.cos(ang)]])
    h, w = dims
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return np.column_stack([m, c + t - m @ c])


def _bilinear_image(img: np.ndarray, x: np.ndarray, y: np.ndarray,
                    fill: float) -> np.ndarray:
    h, w = img.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.where(inside, x, 0.0)
    yc = np.where(inside, y, 0.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return np.where(inside, top * (1 - fy) + bot * fy, fill)


def _centered_mask(spec: PhantomSpec, nz: int, nx: int) -> np.ndarray:
    """Place the rendered text in the middle of the (nz, nx) UV raster."""
    mask = np.zeros((nz, nx), dtype=bool)
    if not spec.ink_text:
        return mask
    glyph = render_glyph_mask(spec.ink_text,
                              (spec.glyph_cell_w, spec.glyph_cell_h))
    gh, gw = glyph.shape
    if gw > nx or gh > nz:
        raise ValueError(f"ink_text raster {gw}x{gh} exceeds surface "
                         f"{nx}x{nz}")
    x0 = (nx - gw) // 2
    z0 = (nz - gh) // 2
    mask[z0:z0 + gh, x0:x0 + gw] = glyph
    return mask


def _quantize_meta(spec: PhantomSpec) -> dict:
    return {"seed": spec.seed, "source": f"inktrace phantom {spec.kind}"}


def generate_fragment(spec: PhantomSpec) -> tuple[VoxelGrid, GroundTruth,
                                                  SurfacePhoto]:
    """Build a multi-layer fragment volume, its ground truth, and a photo."""
    if spec.kind != "fragment":
        raise ValueError(f"spec.kind is {spec.kind!r}, not fragment")
    rng = np.random.default_rng(spec.seed)
    vs = spec.voxel_size
    nx, nz = spec.size_x, spec.size_z
    t = spec.sheet_thickness / vs
    ink_d = spec.ink_depth / vs
    warp_amp = spec.warp_amplitude / vs
    spacing = 2.0 * t  # layer centerlines: one thickness of air between sheets
    pad = 16.0
    ny = int(np.ceil(2 * pad + (spec.layer_count - 1) * spacing + t
                     + 2 * warp_amp + ink_d))
    ny += (-ny) % 8
    y0 = pad + t / 2.0

    centers = []
    for layer in range(spec.layer_count):
        warp = _warp_field(rng, nx, nz, warp_amp)
        centers.append(y0 + layer * spacing + warp)
    for layer in range(spec.layer_count - 1):
        gap = (centers[layer + 1] - centers[layer]).min()
        if gap < t + 1.0:
            raise ValueError(
                f"layers {layer} and {layer + 1} self-intersect: min center "
                f"gap {gap:.2f} vox < thickness {t:.2f} + 1; reduce "
                f"warp_amplitude or thin the sheets")

    fiber_phases = [_fiber_phases(rng) for _ in range(spec.layer_count)]
    mask = _centered_mask(spec, nz, nx)
    inked_layers = min(2, spec.layer_count)

    period = spec.fiber_period / vs
    xx = np.arange(nx, dtype=np.float64)
    zz = np.arange(nz, dtype=np.float64)
    yy = np.arange(ny, dtype=np.float64)
    vol = np.zeros((nz, ny, nx))
    voxel_ink = np.zeros((nz, ny, nx), dtype=bool)
    band_clear = np.zeros((nz, ny, nx), dtype=bool)
    for layer in range(spec.layer_count):
        dist = yy[None, :, None] - centers[layer][:, None, :]
        cov = np.clip(t / 2.0 - np.abs(dist) + 0.5, 0.0, 1.0)
        profile = 1.0 + spec.core_boost * np.clip(
            1.0 - (2.0 * dist / t) ** 2, 0.0, 1.0)
        fib = _crossed_fibers(xx[None, :], zz[:, None], period,
                              fiber_phases[layer])
        fib3 = spec.fiber_amplitude * fib[:, None, :]
        band = (dist >= t / 2.0 - ink_d) & (dist <= t / 2.0)
        ink3 = band & (mask[:, None, :] if layer < inked_layers else False)
        if spec.ink_mode == "morphology":
            val = PAPYRUS_BASE * profile * (1.0 + np.where(ink3, 0.0, fib3))
        else:
            val = PAPYRUS_BASE * profile * (1.0 + fib3) \
                + spec.ink_strength * ink3
        vol += val * cov
        voxel_ink |= ink3 & (cov >= 0.5)
        band_clear |= band & ~ink3 & (cov >= 0.5)

    if spec.ink_mode == "morphology":
        _calibrate_morphology(spec, vol, voxel_ink, band_clear)

    if spec.noise_sigma > 0:
        vol += spec.noise_sigma * rng.standard_normal(vol.shape)

    grid = quantize(vol, IntensityWindow(0.0, 1.0), vs,
                    meta=_quantize_meta(spec))

    layer_meshes = []
    rows = np.arange(0, nz, 2)
    cols = np.arange(0, nx, 2)
    for layer in range(spec.layer_count):
        cz, cx = np.meshgrid(rows, cols, indexing="ij")
        verts = np.stack([cx.ravel().astype(np.float64),
                          centers[layer][cz.ravel(), cx.ravel()],
                          cz.ravel().astype(np.float64)], axis=1)
        uv = np.stack([cx.ravel(), cz.ravel()], axis=1).astype(np.float64)
        layer_meshes.append(grid_mesh(verts, len(rows), len(cols), uv=uv))

    gt = GroundTruth(
        true_mesh=layer_meshes[0],
        ink_mask=[mask.copy() if layer < inked_layers
                  else np.zeros_like(mask) for layer in range(spec.layer_count)],
        provenance={"kind": spec.kind, "seed": spec.seed, "voxel_size_um": vs,
                    "layer_count": spec.layer_count, "ink_mode": spec.ink_mode},
        layer_meshes=layer_meshes,
        voxel_ink=voxel_ink)

    photo_uv = 0.88 - 0.76 * mask.astype(np.float64)
    transform = _random_affine(rng, (nz, nx))
    px, pz = np.meshgrid(xx, zz)
    ux = transform[0, 0] * px + transform[0, 1] * pz + transform[0, 2]
    uz = transform[1, 0] * px + transform[1, 1] * pz + transform[1, 2]
    photo = _bilinear_image(photo_uv, ux, uz, fill=0.88)
    return grid, gt, SurfacePhoto(image=photo, applied_transform=transform)


def _calibrate_morphology(spec, vol, voxel_ink, band_clear):
    """Remove the residual mean shift from fiber suppression, then assert
    ink is intensity-neutral against matched clear surface voxels."""
    if not (voxel_ink.any() and band_clear.any()):
        return
    vol[voxel_ink] -= vol[voxel_ink].mean() - vol[band_clear].mean()
    resid = abs(vol[voxel_ink].mean() - vol[band_clear].mean())
    limit = 0.1 * spec.noise_sigma if spec.noise_sigma > 0 else 1e-9
    if resid >= limit:
        raise ValueError(f"morphology ink shifts mean intensity by "
                         f"{resid:.2e} >= {limit:.2e}")


def generate_scroll(spec: PhantomSpec) -> tuple[VoxelGrid, GroundTruth]:
    """Build an Archimedean-spiral scroll volume and its ground truth."""
    if spec.kind != "scroll":
        raise ValueError(f"spec.kind is {spec.kind!r}, not scroll")
    if spec.spiral_pitch < spec.sheet_thickness:
        raise ValueError(
            f"spiral_pitch {spec.spiral_pitch} um < sheet_thickness "
            f"{spec.sheet_thickness} um: wraps would interpenetrate")
    rng = np.random.default_rng(spec.seed)
    vs = spec.voxel_size
    t = spec.sheet_thickness / vs
    ink_d = spec.ink_depth / vs
    pitch = spec.spiral_pitch / vs
    r0 = 2.0 * pitch
    theta_max = 2.0 * np.pi * spec.wraps
    rmax = r0 + pitch * spec.wraps + t
    pad = 6.0
    half = int(np.ceil(rmax + pad))
    nx = ny = 2 * half + 1
    nz = spec.size_z
    cx = cy = float(half)

    xx = np.arange(nx, dtype=np.float64)
    yy = np.arange(ny, dtype=np.float64)
    gx, gy = np.meshgrid(xx - cx, yy - cy)
    rr = np.hypot(gx, gy)
    phi = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)

    # Nearest wrap of the spiral r(theta) = r0 + pitch * theta / 2pi along
    # this azimuth; k indexes the wrap.
    k_float = (rr - r0) / pitch - phi / (2.0 * np.pi)
    best_d = np.full(rr.shape, np.inf)
    best_theta = np.zeros(rr.shape)
    for k in (np.floor(k_float), np.ceil(k_float)):
        kk = np.clip(k, 0, spec.wraps - 1)
        theta = phi + 2.0 * np.pi * kk
        d = rr - (r0 + pitch * theta / (2.0 * np.pi))
        pick = np.abs(d) < np.abs(best_d)
        best_d = np.where(pick, d, best_d)
        best_theta = np.where(pick, theta, best_theta)
    in_range = best_theta <= theta_max

    cov2 = np.clip(t / 2.0 - np.abs(best_d) + 0.5, 0.0, 1.0) * in_range
    profile2 = 1.0 + spec.core_boost * np.clip(
        1.0 - (2.0 * best_d / t) ** 2, 0.0, 1.0)
    arc = best_theta * (r0 + pitch * best_theta / (2.0 * np.pi))

    phases = _fiber_phases(rng)
    period = spec.fiber_period / vs
    zz = np.arange(nz, dtype=np.float64)

    u_max = theta_max * (r0 + pitch * spec.wraps)
    mask = _centered_mask(spec, nz, int(np.ceil(u_max)) + 1)
    u_idx = np.clip(np.rint(arc).astype(np.intp), 0, mask.shape[1] - 1)
    # Ink on the inner face: the band just inside the centerline.
    band2 = (best_d >= -t / 2.0) & (best_d <= -t / 2.0 + ink_d) & in_range

    k_fib = 2.0 * np.pi / period
    fib_u = np.sin(k_fib * arc + phases[0])
    vol = np.empty((nz, ny, nx))
    voxel_ink = np.zeros((nz, ny, nx), dtype=bool)
    band_clear = np.zeros((nz, ny, nx), dtype=bool)
    for z in range(nz):
        fib = 0.5 * (fib_u + np.sin(k_fib * z + phases[1]))
        ink2 = band2 & mask[z][u_idx]
        fib_term = spec.fiber_amplitude * fib
        if spec.ink_mode == "morphology":
            val = PAPYRUS_BASE * profile2 * (1.0 + np.where(ink2, 0.0, fib_term))
        else:
            val = PAPYRUS_BASE * profile2 * (1.0 + fib_term) \
                + spec.ink_strength * ink2
        vol[z] = val * cov2
        voxel_ink[z] = ink2 & (cov2 >= 0.5)
        band_clear[z] = band2 & ~ink2 & (cov2 >= 0.5)

    if spec.ink_mode == "morphology":
        _calibrate_morphology(spec, vol, voxel_ink, band_clear)

    if spec.noise_sigma > 0:
        vol += spec.noise_sigma * rng.standard_normal(vol.shape)
    grid = quantize(vol, IntensityWindow(0.0, 1.0), vs,
                    meta=_quantize_meta(spec))

    arc_step = 2.0
    n_arc = int(np.ceil(u_max / arc_step)) + 1
    thetas = np.zeros(n_arc)
    # Invert u(theta) by marching: du/dtheta = r0 + pitch * theta / pi.
    for i in range(1, n_arc):
        th = thetas[i - 1]
        thetas[i] = th + arc_step / (r0 + pitch * th / np.pi)
    thetas = np.clip(thetas, 0.0, theta_max)
    rows = np.arange(0, nz, 2)
    r_th = r0 + pitch * thetas / (2.0 * np.pi)
    ring = np.stack([cx + r_th * np.cos(thetas),
                     cy + r_th * np.sin(thetas)], axis=1)
    verts = np.concatenate([
        np.column_stack([ring, np.full(n_arc, float(z))]) for z in rows])
    uv = np.concatenate([
        np.column_stack([thetas * r_th, np.full(n_arc, float(z))])
        for z in rows])
    true_mesh = grid_mesh(verts, len(rows), n_arc, uv=uv)

    gt = GroundTruth(
        true_mesh=true_mesh,
        ink_mask=[mask],
        provenance={"kind": spec.kind, "seed": spec.seed, "voxel_size_um": vs,
                    "wraps": spec.wraps, "ink_mode": spec.ink_mode},
        layer_meshes=[true_mesh],
        voxel_ink=voxel_ink)
    return grid, gt


def spec_to_text(spec: PhantomSpec) -> str:
    """Flat key=value serialization, one field per line."""
    out = io.StringIO()
    for f in fields(spec):
        out.write(f"{f.name} = {getattr(spec, f.name)}\n")
    return out.getvalue()


def spec_from_text(text: str) -> PhantomSpec:
    known = {f.name: f.type for f in fields(PhantomSpec)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown phantom key {key!r}")
        kwargs[key] = val
    spec = PhantomSpec()
    converted = {}
    for key, val in kwargs.items():
        current = getattr(spec, key)
        if isinstance(current, bool):
            converted[key] = val.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            converted[key] = int(val)
        elif isinstance(current, float):
            converted[key] = float(val)
        else:
            converted[key] = val
    return replace(spec, **converted)


def suggest_seeds(gt: GroundTruth, z: float, count: int = 12) -> np.ndarray:
    """Evenly spaced (x, y) points on the true surface at slice z."""
    mesh = gt.true_mesh
    verts = mesh.vertices.reshape(mesh.rows, mesh.cols, 3)
    row = int(np.argmin(np.abs(verts[:, 0, 2] - z)))
    idx = np.linspace(0, mesh.cols - 1, count).round().astype(int)
    return verts[row, idx][:, :2].copy()


def write_phantom_dir(spec: PhantomSpec, outdir) -> dict[str, Path]:
    """Generate the phantom and write every artifact under ``outdir``.

    Layout: slice stack at the top level, ``ground_truth/`` with per-layer
    ink masks (PNG), per-layer meshes (OBJ with UVs), the surface photo
    (16-bit TIFF) and its 2x3 transform, plus ``phantom_spec.txt`` and a
    ``seeds.txt`` starting chain for the tracer.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    photo = None
    if spec.kind == "fragment":
        grid, gt, photo = generate_fragment(spec)
    else:
        grid, gt = generate_scroll(spec)

    paths = {}
    save_slice_stack(grid, outdir / "volume")
    paths["volume"] = outdir / "volume"
    gt_dir = outdir / "ground_truth"
    gt_dir.mkdir(exist_ok=True)
    for i, m in enumerate(gt.ink_mask):
        p = gt_dir / f"ink_mask_l{i}.png"
        Image.fromarray((m * np.uint8(255))).save(p)
        paths[f"ink_mask_l{i}"] = p
    for i, m in enumerate(gt.layer_meshes):
        p = gt_dir / f"mesh_l{i}.obj"
        save_obj(m, p)
        paths[f"mesh_l{i}"] = p
    if photo is not None:
        p = gt_dir / "photo.tif"
        img = np.rint(np.clip(photo.image, 0.0, 1.0) * 65535).astype(np.uint16)
        Image.fromarray(img).save(p)
        paths["photo"] = p
        tp = gt_dir / "transform.txt"
        tp.write_text(" ".join(f"{v:.9f}"
                               for v in photo.applied_transform.ravel()) + "\n")
        paths["transform"] = tp
    sp = outdir / "phantom_spec.txt"
    sp.write_text(spec_to_text(spec))
    paths["spec"] = sp

    z0 = 4.0
    seeds = suggest_seeds(gt, z0)
    sd = outdir / "seeds.txt"
    sd.write_text(f"# z {z0}\n" + "\n".join(
        f"{x:.4f} {y:.4f}" for x, y in seeds) + "\n")
    paths["seeds"] = sd
    return paths
