"""Shared fixtures: small phantoms, synthetic volumes, labeled regions."""

import numpy as np
import pytest

from inktrace.ink_model import Region
from inktrace.labeling import LabelImage
from inktrace.phantom import PhantomSpec, generate_fragment
from inktrace.unwrap import SurfaceVolume
from inktrace.volume import IntensityWindow, quantize


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(size_x=96, size_z=96, layer_count=1, ink_text="N",
                       seed=11)


@pytest.fixture(scope="session")
def small_fragment(small_spec):
    grid, gt, photo = generate_fragment(small_spec)
    return small_spec, grid, gt, photo


@pytest.fixture(scope="session")
def flat_fragment():
    """Flat, noise-free fragment: analytic geometry checks stay exact."""
    spec = PhantomSpec(size_x=96, size_z=96, layer_count=1, ink_text="NO",
                       warp_amplitude=0.0, noise_sigma=0.0, seed=5)
    grid, gt, photo = generate_fragment(spec)
    return spec, grid, gt, photo


@pytest.fixture
def make_plane_grid():
    """Volume with one bright sheet at y = y0 + slope_z * z."""

    def make(nz=24, ny=48, nx=64, y0=20.3, slope_z=0.0, width=4.0,
             voxel_size=4.0):
        z, y, _ = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                              indexing="ij", sparse=False)
        c = y0 + slope_z * z
        vals = np.exp(-0.5 * ((y - c) / (width / 2.0)) ** 2)
        return quantize(vals, IntensityWindow(0.0, 1.0), voxel_size)

    return make


def synth_surface_volume(h=40, w=64, d=17, seed=0, contrast=0.5,
                         noise=0.05):
    """Surface volume whose ink pixels differ by a clean depth bump."""
    rng = np.random.default_rng(seed)
    ink = np.zeros((h, w), dtype=bool)
    for x0 in range(4, w - 4, 9):
        ink[6:h - 6, x0:x0 + 3] = True
    data = 0.3 + noise * rng.standard_normal((h, w, d))
    bump = np.exp(-0.5 * ((np.arange(d) - d / 2.0) / 2.0) ** 2)
    data += contrast * ink[:, :, None] * bump
    sv = SurfaceVolume(data=data * 65535.0,
                       validity=np.ones((h, w, d), dtype=bool),
                       step=1.0, px_per_voxel=1.0,
                       uv_origin=np.zeros(2), voxel_size=4.0)
    labels = LabelImage(ink=ink, region=np.ones((h, w), dtype=bool))
    return sv, labels


@pytest.fixture
def labeled_halves():
    """Two non-overlapping regions over one synthetic surface volume."""
    sv, labels = synth_surface_volume()
    h, w = labels.ink.shape
    left = Region(id="left", sv=sv, labels=labels, rect=(0, 0, w // 2, h))
    right = Region(id="right", sv=sv, labels=labels, rect=(w // 2, 0, w, h))
    return left, right
