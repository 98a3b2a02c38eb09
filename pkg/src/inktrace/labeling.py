"""Aligning a surface photograph onto the flattened UV raster.

The photo-to-raster motion is modeled as a 2D affine estimated from
landmark pairs, the photo is inverse-warped with bilinear filtering, and
ink labels come from thresholding (dark = ink) inside the mapped region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class AffineTransform2D:
    """2x3 row-major matrix mapping source (x, y) to target coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (2, 3):
            raise ValueError(f"matrix must be 2x3, got {self.matrix.shape}")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "AffineTransform2D":
        m = self.matrix[:, :2]
        det = np.linalg.det(m)
        if abs(det) < 1e-12:
            raise ValueError("transform is not invertible")
        inv = np.linalg.inv(m)
        return AffineTransform2D(
            np.column_stack([inv, -inv @ self.matrix[:, 2]]))


@dataclass
class LabelImage:
    """Binary ink labels over the UV raster; ink is always inside region."""

    ink: np.ndarray
    region: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ink.shape != self.region.shape:
            raise ValueError("ink and region dims differ")
        if (self.ink & ~self.region).any():
            raise ValueError("ink labels outside the region mask")


def estimate_affine(photo_pts, uv_pts) -> AffineTransform2D:
    """Least-squares affine from >= 3 non-collinear landmark pairs."""
    photo_pts = np.asarray(photo_pts, dtype=np.float64)
    uv_pts = np.asarray(uv_pts, dtype=np.float64)
    if photo_pts.shape != uv_pts.shape or photo_pts.ndim != 2 \
            or photo_pts.shape[1] != 2:
        raise ValueError("landmark arrays must both be (n, 2)")
    if len(photo_pts) < 3:
        raise ValueError(f"need >= 3 landmark pairs, got {len(photo_pts)}")
    design = np.column_stack([photo_pts, np.ones(len(photo_pts))])
    if np.linalg.matrix_rank(design) < 3:
        raise ValueError("landmarks are collinear; affine is underdetermined")
    coef, _, _, _ = np.linalg.lstsq(design, uv_pts, rcond=None)
    return AffineTransform2D(coef.T)


def warp_photo(photo: np.ndarray, t: AffineTransform2D,
               out_dims: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Resample the photo onto the UV raster via the inverse map.

    ``t`` maps photo pixels to UV raster pixels.  Returns ``(image,
    region)``; pixels whose source lies outside the photo are 0 with the
    region mask cleared.
    """
    photo = np.asarray(photo, dtype=np.float64)
    h, w = out_dims
    inv = t.inverse()
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    src = inv.apply(np.column_stack([gx.ravel(), gy.ravel()]))
    sx = src[:, 0].reshape(h, w)
    sy = src[:, 1].reshape(h, w)
    ph, pw = photo.shape
    region = (sx >= 0) & (sx <= pw - 1) & (sy >= 0) & (sy <= ph - 1)
    xc = np.where(region, sx, 0.0)
    yc = np.where(region, sy, 0.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(pw - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(ph - 2, 0))
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, pw - 1)
    y1 = np.minimum(y0 + 1, ph - 1)
    top = photo[y0, x0] * (1 - fx) + photo[y0, x1] * fx
    bot = photo[y1, x0] * (1 - fx) + photo[y1, x1] * fx
    return np.where(region, top * (1 - fy) + bot * fy, 0.0), region


def otsu_threshold(values: np.ndarray) -> float:
    """Threshold maximizing between-class variance on a 256-bin histogram."""
    vmin = float(values.min())
    vmax = float(values.max())
    if vmax <= vmin:
        raise ValueError("constant image under Otsu; use a fixed threshold")
    hist, edges = np.histogram(values, bins=256, range=(vmin, vmax))
    p = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    omega = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    k = int(np.argmax(sigma_b[:-1]))
    return float(edges[k + 1])


def binarize(aligned: np.ndarray, region: np.ndarray, method: str = "otsu",
             threshold: float | None = None) -> LabelImage:
    """Dark-means-ink thresholding restricted to the region mask."""
    aligned = np.asarray(aligned, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if aligned.shape != region.shape:
        raise ValueError("image and region dims differ")
    if not region.any():
        raise ValueError("empty region mask")
    if method == "otsu":
        theta = otsu_threshold(aligned[region])
    elif method == "fixed":
        if threshold is None:
            raise ValueError("fixed method needs a threshold")
        theta = float(threshold)
    else:
        raise ValueError(f"unknown binarize method {method!r}")
    ink = (aligned < theta) & region
    return LabelImage(ink=ink, region=region,
                      provenance={"method": method, "threshold": theta})


def save_landmarks(path, photo_pts: np.ndarray, uv_pts: np.ndarray) -> None:
    """One ``px py u v`` row per landmark pair."""
    lines = [f"{p[0]:.6f} {p[1]:.6f} {q[0]:.6f} {q[1]:.6f}"
             for p, q in zip(np.asarray(photo_pts), np.asarray(uv_pts))]
    Path(path).write_text("\n".join(lines) + "\n")


def load_landmarks(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"landmarks line {lineno}: expected "
                             f"'px py u v', got {raw!r}")
        rows.append([float(x) for x in parts])
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return arr[:, :2], arr[:, 2:]


def save_labels(label: LabelImage, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(label.ink.astype(np.uint8) * np.uint8(255)).save(
        outdir / "ink.png")
    Image.fromarray(label.region.astype(np.uint8) * np.uint8(255)).save(
        outdir / "region.png")
    (outdir / "label_meta.json").write_text(json.dumps(
        label.provenance, sort_keys=True, indent=2, default=float) + "\n")


def load_labels(outdir) -> LabelImage:
    outdir = Path(outdir)
    ink = np.asarray(Image.open(outdir / "ink.png")) > 0
    region = np.asarray(Image.open(outdir / "region.png")) > 0
    meta_path = outdir / "label_meta.json"
    provenance = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return LabelImage(ink=ink, region=region, provenance=provenance)
