"""Conformal flattening and surface-volume resampling.

``flatten_mesh`` computes a least-squares conformal parameterization with
two pinned boundary vertices and rescales UVs so mean triangle area is
preserved.  ``sample_surface_volume`` rasterizes the UV chart and samples
the CT volume along interpolated surface normals, giving a (H, W, D)
stack whose central channel rides on the surface.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.sparse.linalg import spsolve

from .mesh import SurfaceMesh, boundary_vertices, face_normals_areas, \
    vertex_normals
from .volume import IntensityWindow, VoxelGrid, dequantize, trilinear

QUANT_WINDOW_KEYS = ("window_lo", "window_hi")


class FlattenError(Exception):
    """The parameterization folded over itself."""


@dataclass
class FlattenedMesh:
    """A mesh with UVs plus per-triangle distortion diagnostics."""

    mesh: SurfaceMesh
    area_ratio: np.ndarray    # uv area / 3d area, per triangle
    angle_dev: np.ndarray     # max |uv angle - 3d angle| per triangle, rad


def _triangle_angles(p: np.ndarray) -> np.ndarray:
    """Corner angles of triangles given (m, 3, dim) vertex positions."""
    out = np.empty(p.shape[:2])
    for j in range(3):
        a = p[:, (j + 1) % 3] - p[:, j]
        b = p[:, (j + 2) % 3] - p[:, j]
        cosang = (a * b).sum(axis=1) / np.maximum(
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
        out[:, j] = np.arccos(np.clip(cosang, -1.0, 1.0))
    return out


def _pin_vertices(mesh: SurfaceMesh) -> tuple[int, int, float]:
    """Two far-apart boundary vertices and their graph geodesic distance."""
    boundary = boundary_vertices(mesh)
    if len(boundary) < 2:
        raise ValueError("mesh has no boundary to pin")
    v = mesh.vertices
    centroid = v.mean(axis=0)
    start = boundary[np.argmax(((v[boundary] - centroid) ** 2).sum(axis=1))]
    pa = boundary[np.argmax(((v[boundary] - v[start]) ** 2).sum(axis=1))]
    pb = boundary[np.argmax(((v[boundary] - v[pa]) ** 2).sum(axis=1))]

    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                            mesh.faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    lengths = np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)
    n = len(v)
    graph = coo_matrix((np.concatenate([lengths, lengths]),
                        (np.concatenate([edges[:, 0], edges[:, 1]]),
                         np.concatenate([edges[:, 1], edges[:, 0]]))),
                       shape=(n, n)).tocsr()
    dist = dijkstra(graph, indices=int(pa))[int(pb)]
    if not np.isfinite(dist):
        raise ValueError("mesh is disconnected between pin vertices")
    return int(pa), int(pb), float(dist)


def flatten_mesh(mesh: SurfaceMesh) -> FlattenedMesh:
    """Least-squares conformal parameterization with two pinned vertices.

    Raises FlattenError when any UV triangle is flipped relative to the
    rest.  The solve MUST RUN IN FLOAT64; the normal equations lose the
    distortion bounds at lower precision.
    """
    v = mesh.vertices
    f = mesh.faces
    n, m = len(v), len(f)
    p = v[f]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    nrm = np.cross(e1, e2)
    double_area = np.linalg.norm(nrm, axis=1)
    if (double_area <= 0).any():
        raise ValueError(f"{int((double_area <= 0).sum())} degenerate "
                         "triangles")
    areas3d = 0.5 * double_area

    ex = e1 / np.linalg.norm(e1, axis=1)[:, None]
    nu = nrm / double_area[:, None]
    ey = np.cross(nu, ex)
    # Local 2D coords: q1 = (0,0), q2 = (|e1|, 0), q3 = (e2.ex, e2.ey).
    q = np.zeros((m, 3, 2))
    q[:, 1, 0] = np.linalg.norm(e1, axis=1)
    q[:, 2, 0] = (e2 * ex).sum(axis=1)
    q[:, 2, 1] = (e2 * ey).sum(axis=1)

    # Cauchy-Riemann residual per triangle, area-weighted: rows built from
    # opposite-edge vectors rotated 90 degrees.
    opp = q[:, [2, 0, 1], :] - q[:, [1, 2, 0], :]     # edge opposite corner j
    scale = 1.0 / (2.0 * np.sqrt(areas3d))
    aj = -opp[..., 1] * scale[:, None]
    bj = opp[..., 0] * scale[:, None]

    rows = np.repeat(np.arange(2 * m).reshape(m, 2), 3, axis=1)
    tri_rows_re = rows[:, :3]
    tri_rows_im = rows[:, 3:]
    cols_u = f
    cols_v = f + n
    data = np.concatenate([aj.ravel(), -bj.ravel(),
                           bj.ravel(), aj.ravel()])
    rr = np.concatenate([tri_rows_re.ravel(), tri_rows_re.ravel(),
                         tri_rows_im.ravel(), tri_rows_im.ravel()])
    cc = np.concatenate([cols_u.ravel(), cols_v.ravel(),
                         cols_u.ravel(), cols_v.ravel()])
    a_full = coo_matrix((data, (rr, cc)), shape=(2 * m, 2 * n)).tocsc()

    pa, pb, L = _pin_vertices(mesh)
    pin_cols = np.array([pa, pa + n, pb, pb + n])
    pin_vals = np.array([0.0, 0.0, L, 0.0])
    free = np.setdiff1d(np.arange(2 * n), pin_cols)
    b = -(a_full[:, pin_cols] @ pin_vals)
    a_free = a_full[:, free].tocsr()

    ata = (a_free.T @ a_free).tocsc()
    atb = a_free.T @ b
    x = spsolve(ata, atb)

    uvflat = np.empty(2 * n)
    uvflat[free] = x
    uvflat[pin_cols] = pin_vals
    uv = np.column_stack([uvflat[:n], uvflat[n:]])

    quv = uv[f]
    signed = 0.5 * ((quv[:, 1, 0] - quv[:, 0, 0])
                    * (quv[:, 2, 1] - quv[:, 0, 1])
                    - (quv[:, 2, 0] - quv[:, 0, 0])
                    * (quv[:, 1, 1] - quv[:, 0, 1]))
    if signed.sum() < 0:          # canonical handedness, not a fold
        uv[:, 1] = -uv[:, 1]
        signed = -signed
    flipped = int((signed <= 0).sum())
    if flipped:
        raise FlattenError(f"{flipped} flipped triangles in UV layout")

    areas_uv = signed
    s = np.sqrt(areas3d.mean() / areas_uv.mean())
    uv *= s
    areas_uv = areas_uv * s * s

    ang3 = _triangle_angles(p)
    anguv = _triangle_angles(uv[f][..., None, :].reshape(m, 3, 2))
    out_mesh = SurfaceMesh(vertices=v.copy(), faces=f.copy(),
                           rows=mesh.rows, cols=mesh.cols, uv=uv)
    return FlattenedMesh(mesh=out_mesh,
                         area_ratio=areas_uv / areas3d,
                         angle_dev=np.abs(anguv - ang3).max(axis=1))


def distortion_metrics(mesh: SurfaceMesh) -> FlattenedMesh:
    """Recompute distortion diagnostics for a mesh that already has UVs
    (e.g. reloaded from disk)."""
    if mesh.uv is None:
        raise ValueError("mesh has no UV chart")
    _, areas3d = face_normals_areas(mesh.vertices, mesh.faces)
    quv = mesh.uv[mesh.faces]
    areas_uv = 0.5 * np.abs((quv[:, 1, 0] - quv[:, 0, 0])
                            * (quv[:, 2, 1] - quv[:, 0, 1])
                            - (quv[:, 2, 0] - quv[:, 0, 0])
                            * (quv[:, 1, 1] - quv[:, 0, 1]))
    ang3 = _triangle_angles(mesh.vertices[mesh.faces])
    anguv = _triangle_angles(quv)
    return FlattenedMesh(mesh=mesh,
                         area_ratio=areas_uv / np.maximum(areas3d, 1e-300),
                         angle_dev=np.abs(anguv - ang3).max(axis=1))


@dataclass
class SurfaceVolume:
    """Samples along the surface normals over a rasterized UV chart.

    data : (H, W, D) float, channel D//2 on the surface
    validity : (H, W, D) bool, False where a sample left the volume or the
        pixel is outside the chart
    """

    data: np.ndarray
    validity: np.ndarray
    step: float
    px_per_voxel: float
    uv_origin: np.ndarray
    voxel_size: float
    meta: dict = field(default_factory=dict)
    positions: np.ndarray | None = None

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    def pixel_valid(self) -> np.ndarray:
        """Pixels whose central channel is a real sample."""
        return self.validity[:, :, self.depth // 2]


def _rasterize(fmesh: FlattenedMesh, px_per_voxel: float):
    uv = fmesh.mesh.uv
    faces = fmesh.mesh.faces
    origin = uv.min(axis=0)
    r = (uv - origin) * px_per_voxel
    w = int(np.floor(r[:, 0].max())) + 1
    h = int(np.floor(r[:, 1].max())) + 1
    covered = np.zeros((h, w), dtype=bool)
    bary = np.zeros((h, w, 3))
    tri_of = np.full((h, w), -1, dtype=np.intp)
    eps = 1e-9
    for t, face in enumerate(faces):
        tr = r[face]
        x0 = max(int(np.ceil(tr[:, 0].min() - eps)), 0)
        x1 = min(int(np.floor(tr[:, 0].max() + eps)), w - 1)
        y0 = max(int(np.ceil(tr[:, 1].min() - eps)), 0)
        y1 = min(int(np.floor(tr[:, 1].max() + eps)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        det = ((tr[1, 0] - tr[0, 0]) * (tr[2, 1] - tr[0, 1])
               - (tr[2, 0] - tr[0, 0]) * (tr[1, 1] - tr[0, 1]))
        if det == 0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        dx = gx - tr[0, 0]
        dy = gy - tr[0, 1]
        l1 = ((tr[2, 1] - tr[0, 1]) * dx - (tr[2, 0] - tr[0, 0]) * dy) / det
        l2 = (-(tr[1, 1] - tr[0, 1]) * dx + (tr[1, 0] - tr[0, 0]) * dy) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        claim = inside & ~covered[y0:y1 + 1, x0:x1 + 1]
        if not claim.any():
            continue
        yy, xx = np.nonzero(claim)
        covered[y0 + yy, x0 + xx] = True
        tri_of[y0 + yy, x0 + xx] = t
        bary[y0 + yy, x0 + xx, 0] = l0[yy, xx]
        bary[y0 + yy, x0 + xx, 1] = l1[yy, xx]
        bary[y0 + yy, x0 + xx, 2] = l2[yy, xx]
    return origin, covered, tri_of, bary


def sample_surface_volume(grid: VoxelGrid, fmesh: FlattenedMesh,
                          depth: int = 33, step: float = 1.0,
                          px_per_voxel: float = 1.0, threads: int = 1,
                          keep_positions: bool = False) -> SurfaceVolume:
    """Sample ``depth`` channels at ``position + offset * normal``.

    Work is split over pixel-row blocks; every block writes a disjoint
    output slice, so the result is bit-identical for any thread count.
    """
    if depth < 1 or depth % 2 == 0:
        raise ValueError(f"depth must be odd and positive, got {depth}")
    if fmesh.mesh.uv is None:
        raise ValueError("mesh has no UV chart; run flatten_mesh first")
    if threads < 1:
        raise ValueError("threads must be >= 1")

    origin, covered, tri_of, bary = _rasterize(fmesh, px_per_voxel)
    h, w = covered.shape
    vn = vertex_normals(fmesh.mesh)
    verts = fmesh.mesh.vertices
    faces = fmesh.mesh.faces

    pos = np.zeros((h, w, 3))
    nrm = np.zeros((h, w, 3))
    ys, xs = np.nonzero(covered)
    fv = faces[tri_of[ys, xs]]
    lam = bary[ys, xs]
    pos[ys, xs] = np.einsum("nk,nkd->nd", lam, verts[fv])
    raw_n = np.einsum("nk,nkd->nd", lam, vn[fv])
    nl = np.linalg.norm(raw_n, axis=1)
    nrm[ys, xs] = raw_n / np.where(nl > 0, nl, 1.0)[:, None]

    offsets = (np.arange(depth) - depth // 2) * step
    data = np.zeros((h, w, depth))
    validity = np.zeros((h, w, depth), dtype=bool)

    def run_block(rows_lo: int, rows_hi: int) -> None:
        blk = covered[rows_lo:rows_hi]
        if not blk.any():
            return
        by, bx = np.nonzero(blk)
        p = pos[rows_lo:rows_hi][by, bx]
        nv = nrm[rows_lo:rows_hi][by, bx]
        for k, off in enumerate(offsets):
            vals, inside = trilinear(grid.data, p + off * nv)
            data[rows_lo:rows_hi, :, k][by, bx] = vals
            validity[rows_lo:rows_hi, :, k][by, bx] = inside

    if threads == 1:
        run_block(0, h)
    else:
        bounds = np.linspace(0, h, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_block, int(lo), int(hi))
                       for lo, hi in zip(bounds[:-1], bounds[1:])]
            for fut in futures:
                fut.result()

    meta = {"depth": depth, "step": step, "px_per_voxel": px_per_voxel,
            "uv_origin": [float(origin[0]), float(origin[1])],
            "uv_scale_um": grid.voxel_size}
    return SurfaceVolume(data=data, validity=validity, step=step,
                         px_per_voxel=px_per_voxel, uv_origin=origin,
                         voxel_size=grid.voxel_size, meta=meta,
                         positions=pos if keep_positions else None)


@dataclass
class TextureImage:
    """A normalized per-pixel reduction of surface-volume channels."""

    image: np.ndarray
    valid: np.ndarray
    window: tuple[float, float]


def texture_image(sv: SurfaceVolume, reduction: str = "max",
                  half_width: int | None = None) -> TextureImage:
    """Reduce channels within ``half_width`` of the surface to one image.

    The result is min/max normalized to [0, 1] over valid pixels;
    all-invalid pixels are 0 and flagged.
    """
    if reduction not in ("max", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    mid = sv.depth // 2
    hw = mid if half_width is None else half_width
    if hw < 0:
        raise ValueError(f"half_width must be >= 0, got {hw}")
    lo = max(mid - hw, 0)
    hi = min(mid + hw, sv.depth - 1)
    band = sv.data[:, :, lo:hi + 1]
    bmask = sv.validity[:, :, lo:hi + 1]
    valid = bmask.any(axis=2)
    if reduction == "max":
        raw = np.where(bmask, band, -np.inf).max(axis=2)
        raw = np.where(valid, raw, 0.0)
    else:
        cnt = bmask.sum(axis=2)
        raw = np.where(bmask, band, 0.0).sum(axis=2) \
            / np.where(cnt > 0, cnt, 1)
    if not valid.any():
        return TextureImage(image=np.zeros(valid.shape), valid=valid,
                            window=(0.0, 1.0))
    vmin = float(raw[valid].min())
    vmax = float(raw[valid].max())
    if vmax > vmin:
        img = np.where(valid, (raw - vmin) / (vmax - vmin), 0.0)
    else:
        img = np.zeros(valid.shape)
    return TextureImage(image=img, valid=valid, window=(vmin, vmax))


def composite(texture: np.ndarray, prediction: np.ndarray) -> np.ndarray:
    """Subtract predicted ink from the texture and clamp to [0, 1]."""
    texture = np.asarray(texture, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if texture.shape != prediction.shape:
        raise ValueError(f"shape mismatch {texture.shape} vs "
                         f"{prediction.shape}")
    return np.clip(texture - prediction, 0.0, 1.0)


def save_surface_volume(sv: SurfaceVolume, path) -> None:
    """Channel TIFF stack + tiled validity PNG + meta.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    valid_any = sv.validity.any()
    if valid_any:
        lo = float(sv.data[sv.validity].min())
        hi = float(sv.data[sv.validity].max())
    else:
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    win = IntensityWindow(lo, hi)
    scaled = np.rint((np.clip(sv.data, lo, hi) - lo)
                     * (65535.0 / (hi - lo))).astype(np.uint16)
    scaled[~sv.validity] = 0
    for k in range(sv.depth):
        Image.fromarray(np.ascontiguousarray(scaled[:, :, k])).save(
            path / f"{k:04d}.tif")
    d = sv.depth
    tiled = np.concatenate([sv.validity[:, :, k] for k in range(d)], axis=1)
    Image.fromarray(tiled.astype(np.uint8) * np.uint8(255)).save(
        path / "validity.png")
    meta = dict(sv.meta)
    meta.update({"depth": sv.depth, "step": sv.step,
                 "px_per_voxel": sv.px_per_voxel,
                 "uv_origin": [float(sv.uv_origin[0]),
                               float(sv.uv_origin[1])],
                 "uv_scale_um": sv.voxel_size,
                 "window_lo": lo, "window_hi": hi,
                 "validity_layout": "channels_tiled_horizontally"})
    (path / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_surface_volume(path) -> SurfaceVolume:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    depth = int(meta["depth"])
    win = IntensityWindow(float(meta["window_lo"]), float(meta["window_hi"]))
    chans = []
    for k in range(depth):
        arr = np.asarray(Image.open(path / f"{k:04d}.tif"), dtype=np.uint16)
        chans.append(dequantize(arr, win))
    data = np.stack(chans, axis=2)
    tiled = np.asarray(Image.open(path / "validity.png")) > 0
    h, wd = tiled.shape
    w = wd // depth
    validity = np.stack([tiled[:, k * w:(k + 1) * w] for k in range(depth)],
                        axis=2)
    data[~validity] = 0.0
    return SurfaceVolume(
        data=data, validity=validity, step=float(meta["step"]),
        px_per_voxel=float(meta["px_per_voxel"]),
        uv_origin=np.array(meta["uv_origin"], dtype=np.float64),
        voxel_size=float(meta["uv_scale_um"]), meta=meta)


def save_texture(tex: TextureImage, path_tif, path_meta) -> None:
    img = np.rint(np.clip(tex.image, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(img).save(path_tif)
    Path(path_meta).write_text(json.dumps(
        {"window_lo": tex.window[0], "window_hi": tex.window[1],
         "normalized": True}, sort_keys=True, indent=2) + "\n")


def load_texture(path_tif) -> np.ndarray:
    arr = np.asarray(Image.open(path_tif), dtype=np.uint16)
    return arr.astype(np.float64) / 65535.0
