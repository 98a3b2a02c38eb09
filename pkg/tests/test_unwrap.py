import numpy as np
import pytest

from inktrace.mesh import (boundary_vertices, euler_characteristic,
                           grid_mesh, load_obj, save_obj, vertex_normals)
from inktrace.unwrap import (FlattenedMesh, SurfaceVolume, TextureImage,
                             composite, distortion_metrics, flatten_mesh,
                             load_surface_volume, load_texture,
                             sample_surface_volume, save_surface_volume,
                             save_texture, texture_image)
from inktrace.volume import IntensityWindow, quantize


def plane_mesh(rows=12, cols=18, sx=1.1, sy=0.9):
    """A tilted planar vertex grid; flattening it must be an isometry."""
    a = np.array([1.0, 0.3, 0.2])
    a /= np.linalg.norm(a)
    b = np.array([-0.2, 1.0, 0.4])
    b -= (b @ a) * a
    b /= np.linalg.norm(b)
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pts = (np.array([5.0, 7.0, 3.0])
           + r[..., None] * sx * a + c[..., None] * sy * b)
    return grid_mesh(pts.reshape(-1, 3), rows, cols)


def cylinder_mesh(rows=30, cols=40, radius=25.0, height=40.0,
                  theta1=np.pi / 2, center=(5.0, 5.0), z0=2.0):
    """Quarter-cylinder patch: developable, so flattening is isometric."""
    th = np.linspace(0.0, theta1, cols)
    z = np.linspace(z0, z0 + height, rows)
    tt, zz = np.meshgrid(th, z, indexing="xy")   # (rows, cols) after swap
    tt, zz = np.meshgrid(th, z, indexing="ij")
    tt, zz = tt.T, zz.T
    x = center[0] + radius * np.cos(tt)
    y = center[1] + radius * np.sin(tt)
    pts = np.stack([x, y, zz], axis=-1)
    return grid_mesh(pts.reshape(-1, 3), rows, cols)


def sphere_cap_mesh(rows=24, cols=24, radius=30.0):
    u = np.linspace(0.15, 0.9, rows)
    v = np.linspace(0.0, 1.2, cols)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.stack([radius * np.sin(uu) * np.cos(vv),
                    radius * np.sin(uu) * np.sin(vv),
                    radius * np.cos(uu)], axis=-1)
    return grid_mesh(pts.reshape(-1, 3), rows, cols)


class TestMeshSupport:
    def test_grid_mesh_is_a_disk(self):
        m = plane_mesh(5, 7)
        assert euler_characteristic(m) == 1
        # boundary of a 5x7 grid: the perimeter vertices
        assert len(boundary_vertices(m)) == 2 * 5 + 2 * 7 - 4

    def test_vertex_normals_of_plane(self):
        m = plane_mesh(6, 6)
        vn = vertex_normals(m)
        ref = vn[0] / np.linalg.norm(vn[0])
        np.testing.assert_allclose(np.abs(vn @ ref), 1.0, atol=1e-12)

    def test_obj_round_trip_with_uv(self, tmp_path):
        m = flatten_mesh(plane_mesh(4, 5)).mesh
        save_obj(m, tmp_path / "m.obj")
        back = load_obj(tmp_path / "m.obj")
        assert (back.rows, back.cols) == (m.rows, m.cols)
        np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-7)
        np.testing.assert_allclose(back.uv, m.uv, atol=1e-7)
        np.testing.assert_array_equal(back.faces, m.faces)


class TestFlatten:
    def test_plane_flattens_isometrically(self):
        fm = flatten_mesh(plane_mesh())
        assert np.abs(fm.area_ratio - 1.0).max() < 1e-6
        assert fm.angle_dev.max() < 1e-6

    def test_quarter_cylinder_flattens_isometrically(self):
        fm = flatten_mesh(cylinder_mesh())
        assert np.abs(fm.area_ratio - 1.0).max() < 1e-3
        assert fm.angle_dev.max() < 1e-3

    def test_sphere_cap_cannot_preserve_area(self):
        fm = flatten_mesh(sphere_cap_mesh())
        # positive curvature: a conformal chart must stretch areas unevenly
        assert fm.area_ratio.max() - fm.area_ratio.min() > 0.02
        assert fm.angle_dev.max() > 0.0

    def test_mean_area_preserved(self):
        fm = flatten_mesh(cylinder_mesh(rows=12, cols=14))
        quv = fm.mesh.uv[fm.mesh.faces]
        areas_uv = 0.5 * np.abs(
            (quv[:, 1, 0] - quv[:, 0, 0]) * (quv[:, 2, 1] - quv[:, 0, 1])
            - (quv[:, 2, 0] - quv[:, 0, 0]) * (quv[:, 1, 1] - quv[:, 0, 1]))
        p = fm.mesh.vertices[fm.mesh.faces]
        areas3d = 0.5 * np.linalg.norm(
            np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
        assert areas_uv.mean() == pytest.approx(areas3d.mean(), rel=1e-9)

    def test_degenerate_triangle_rejected(self):
        pts = plane_mesh(3, 3).vertices.copy()
        pts[4] = pts[3]                      # collapse one vertex
        with pytest.raises(ValueError, match="degenerate"):
            flatten_mesh(grid_mesh(pts, 3, 3))

    def test_distortion_metrics_match_flatten(self):
        fm = flatten_mesh(cylinder_mesh(rows=10, cols=12))
        again = distortion_metrics(fm.mesh)
        np.testing.assert_allclose(again.area_ratio, fm.area_ratio,
                                   atol=1e-9)
        np.testing.assert_allclose(again.angle_dev, fm.angle_dev, atol=1e-9)

    def test_distortion_metrics_need_uv(self):
        with pytest.raises(ValueError, match="UV"):
            distortion_metrics(plane_mesh(3, 3))


def wavy_mesh_for(grid):
    nz, ny, nx = grid.data.shape
    zs = np.arange(2.0, nz - 2.0)
    xs = np.arange(2.0, nx - 2.0)
    zz, xx = np.meshgrid(zs, xs, indexing="ij")
    yy = ny / 2.0 + 2.0 * np.sin(xx / 7.0) + 1.5 * np.cos(zz / 5.0)
    pts = np.stack([xx, yy, zz], axis=-1)
    return grid_mesh(pts.reshape(-1, 3), len(zs), len(xs))


class TestSampleSurfaceVolume:
    def test_depth_must_be_odd(self, make_plane_grid):
        fm = flatten_mesh(wavy_mesh_for(make_plane_grid()))
        with pytest.raises(ValueError, match="odd"):
            sample_surface_volume(make_plane_grid(), fm, depth=4)

    def test_needs_uv_chart(self, make_plane_grid):
        g = make_plane_grid()
        fm = FlattenedMesh(mesh=wavy_mesh_for(g), area_ratio=np.ones(1),
                           angle_dev=np.zeros(1))
        with pytest.raises(ValueError, match="flatten_mesh"):
            sample_surface_volume(g, fm, depth=3)

    def test_central_channel_rides_surface(self, make_plane_grid):
        g = make_plane_grid(y0=24.0, width=6.0)
        zs = np.arange(4.0, 20.0)
        xs = np.arange(4.0, 60.0)
        zz, xx = np.meshgrid(zs, xs, indexing="ij")
        pts = np.stack([xx, np.full_like(xx, 24.0), zz], axis=-1)
        fm = flatten_mesh(grid_mesh(pts.reshape(-1, 3), len(zs), len(xs)))
        sv = sample_surface_volume(g, fm, depth=5, step=1.0)
        mid = sv.pixel_valid()
        center = sv.data[:, :, sv.depth // 2][mid]
        # the sheet peaks at y = 24, so central samples sit near the max
        assert center.min() > 0.95 * 65535
        off = sv.data[:, :, 0][sv.validity[:, :, 0]]
        assert off.mean() < center.mean()

    def test_thread_count_does_not_change_bytes(self, make_plane_grid):
        g = make_plane_grid()
        fm = flatten_mesh(wavy_mesh_for(g))
        one = sample_surface_volume(g, fm, depth=9, step=0.8, threads=1)
        three = sample_surface_volume(g, fm, depth=9, step=0.8, threads=3)
        np.testing.assert_array_equal(one.data, three.data)
        np.testing.assert_array_equal(one.validity, three.validity)

    def test_bad_thread_count(self, make_plane_grid):
        g = make_plane_grid()
        fm = flatten_mesh(wavy_mesh_for(g))
        with pytest.raises(ValueError, match="threads"):
            sample_surface_volume(g, fm, depth=3, threads=0)

    def test_uv_round_trip_lands_on_the_same_pixel(self):
        # Sample over a quarter cylinder and invert the chart analytically:
        # each covered pixel's 3D position, pushed back through the
        # developable map, must come home within 1.5 raster pixels.
        radius, center, z0 = 18.0, (20.0, 20.0), 2.0
        mesh = cylinder_mesh(rows=26, cols=30, radius=radius, height=26.0,
                             center=center, z0=z0)
        g = quantize(np.full((30, 40, 40), 0.5), IntensityWindow(0, 1), 4.0)
        fm = flatten_mesh(mesh)
        sv = sample_surface_volume(g, fm, depth=3, keep_positions=True)

        v = mesh.vertices
        arc = radius * np.arctan2(v[:, 1] - center[1], v[:, 0] - center[0])
        dev = np.column_stack([arc, v[:, 2], np.ones(len(v))])
        affine, *_ = np.linalg.lstsq(dev, fm.mesh.uv, rcond=None)
        assert np.abs(dev @ affine - fm.mesh.uv).max() < 1e-3

        ys, xs = np.nonzero(sv.pixel_valid())
        p = sv.positions[ys, xs]
        parc = radius * np.arctan2(p[:, 1] - center[1], p[:, 0] - center[0])
        uv_pred = np.column_stack([parc, p[:, 2], np.ones(len(p))]) @ affine
        px = (uv_pred - sv.uv_origin) * sv.px_per_voxel
        err = np.hypot(px[:, 0] - xs, px[:, 1] - ys)
        assert err.max() < 1.5

    def test_positions_omitted_by_default(self, make_plane_grid):
        g = make_plane_grid()
        fm = flatten_mesh(wavy_mesh_for(g))
        assert sample_surface_volume(g, fm, depth=3).positions is None


def toy_surface_volume():
    data = np.zeros((2, 3, 3))
    validity = np.ones((2, 3, 3), dtype=bool)
    data[0, 0] = [0.2, 0.9, 0.4]
    data[0, 1] = [0.1, 0.5, 0.3]
    data[0, 2] = [0.0, 0.0, 0.0]
    validity[0, 2] = False                   # fully invalid pixel
    data[1, 0] = [0.6, 0.7, 0.8]
    data[1, 1] = [0.5, 9.9, 0.5]
    validity[1, 1, 1] = False                # masked central spike
    data[1, 2] = [0.3, 0.4, 0.2]
    return SurfaceVolume(data=data, validity=validity, step=1.0,
                         px_per_voxel=1.0, uv_origin=np.zeros(2),
                         voxel_size=4.0)


class TestTextureImage:
    def test_max_reduction_by_hand(self):
        sv = toy_surface_volume()
        tex = texture_image(sv, reduction="max")
        # raw maxima over valid channels
        raw = np.array([[0.9, 0.5, 0.0], [0.8, 0.5, 0.4]])
        vmin, vmax = 0.4, 0.9                # over valid pixels only
        assert tex.window == (vmin, vmax)
        expect = (raw - vmin) / (vmax - vmin)
        expect[0, 2] = 0.0
        np.testing.assert_allclose(tex.image, expect, atol=1e-12)
        assert not tex.valid[0, 2] and tex.valid.sum() == 5

    def test_mean_reduction_by_hand(self):
        sv = toy_surface_volume()
        tex = texture_image(sv, reduction="mean")
        raw11 = (0.5 + 0.5) / 2.0            # spike channel is masked
        vmin, vmax = tex.window
        assert tex.image[1, 1] == pytest.approx((raw11 - vmin)
                                                / (vmax - vmin), abs=1e-12)

    def test_half_width_zero_uses_central_channel(self):
        sv = toy_surface_volume()
        tex = texture_image(sv, reduction="max", half_width=0)
        vmin, vmax = tex.window
        assert vmin == pytest.approx(0.4) and vmax == pytest.approx(0.9)
        assert tex.image[0, 0] == pytest.approx(1.0)

    def test_unknown_reduction(self):
        with pytest.raises(ValueError, match="reduction"):
            texture_image(toy_surface_volume(), reduction="median")

    def test_negative_half_width(self):
        with pytest.raises(ValueError, match="half_width"):
            texture_image(toy_surface_volume(), half_width=-1)

    def test_all_invalid_is_flat_zero(self):
        sv = toy_surface_volume()
        sv.validity[:] = False
        tex = texture_image(sv)
        assert not tex.valid.any()
        np.testing.assert_array_equal(tex.image, 0.0)


class TestComposite:
    def test_subtract_and_clamp(self):
        t = np.array([[0.2, 0.9], [0.5, 1.0]])
        p = np.array([[0.5, 0.4], [0.0, 1.0]])
        np.testing.assert_allclose(composite(t, p),
                                   [[0.0, 0.5], [0.5, 0.0]], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            composite(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSurfaceVolumeIO:
    def test_round_trip(self, tmp_path):
        sv = toy_surface_volume()
        save_surface_volume(sv, tmp_path / "sv")
        back = load_surface_volume(tmp_path / "sv")
        np.testing.assert_array_equal(back.validity, sv.validity)
        lo, hi = back.meta["window_lo"], back.meta["window_hi"]
        tol = (hi - lo) / 65535.0 * 0.51
        ref = np.clip(sv.data, lo, hi)
        ref[~sv.validity] = 0.0              # loader masks invalid samples
        np.testing.assert_allclose(back.data, ref, atol=tol)
        assert back.depth == sv.depth
        assert back.step == sv.step
        np.testing.assert_allclose(back.uv_origin, sv.uv_origin)

    def test_texture_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 20).reshape(4, 5)
        tex = TextureImage(image=img, valid=np.ones((4, 5), bool),
                           window=(0.1, 0.7))
        save_texture(tex, tmp_path / "t.tif", tmp_path / "t.json")
        back = load_texture(tmp_path / "t.tif")
        np.testing.assert_allclose(back, img, atol=0.51 / 65535.0)
