import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrsgs.errors import DegenerateNeighborhood, EmptySweep
from lrsgs.geometry import RigidTransform
from lrsgs.lidar import (
    CalibratedSweep,
    CameraModel,
    SparseImage,
    calibrate_sweep,
    estimate_normal,
    incidence_cos,
    pixel_reflectance_gradient,
    project_to_camera,
)

from util import plane_sweep


def make_camera(f=50.0, cx=32.0, cy=32.0, w=64, h=64, extrinsics=None):
    k = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    return CameraModel(k, extrinsics or RigidTransform.identity(), w, h)


class TestEstimateNormal:
    def test_axis_aligned_plane(self):
        n = estimate_normal(np.array([0, 0, 1.0]), np.array([1, 0, 1.0]), np.array([0, 1, 1.0]))
        np.testing.assert_allclose(n, [0, 0, -1], atol=1e-12)

    def test_independent_of_neighbor_spacing(self):
        n = estimate_normal(np.array([0, 0, 1.0]), np.array([2, 0, 1.0]), np.array([0, 3, 1.0]))
        np.testing.assert_allclose(n, [0, 0, -1], atol=1e-12)

    def test_collinear_raises(self):
        with pytest.raises(DegenerateNeighborhood):
            estimate_normal(np.array([0, 0, 1.0]), np.array([1, 0, 1.0]), np.array([2, 0, 1.0]))

    def test_swap_invariance(self):
        p, p1, p2 = np.array([0.3, -0.2, 1.5]), np.array([1, 0.1, 1.4]), np.array([0, 1.2, 1.6])
        np.testing.assert_allclose(
            estimate_normal(p, p1, p2), estimate_normal(p, p2, p1), atol=1e-12)

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p, p1, p2 = rng.normal(size=(3, 3)) + np.array([0, 0, 5.0])
            try:
                n = estimate_normal(p, p1, p2)
            except DegenerateNeighborhood:
                continue
            assert abs(np.linalg.norm(n) - 1.0) < 1e-9
            assert np.dot(n, p) <= 0


class TestIncidenceCos:
    def test_head_on(self):
        assert incidence_cos(np.array([0, 0, 2.0]), np.array([0, 0, -1.0])) == 1.0

    def test_grazing_clamped(self):
        assert incidence_cos(np.array([1, 0, 0.0]), np.array([0, 0, 1.0])) == 0.05

    def test_45_degrees(self):
        c = incidence_cos(np.array([1, 0, 1.0]), np.array([0, 0, -1.0]))
        assert c == pytest.approx(1 / np.sqrt(2), abs=1e-12)


class TestCalibrateSweep:
    def test_uniform_plane_recovers_one(self):
        sweep = plane_sweep(rho=0.5)
        calib, diag = calibrate_sweep(sweep)
        assert diag.calibrated_points > 0.9 * diag.total_points
        # forward model inverts exactly: every raw value equals rho, p99 = rho
        np.testing.assert_allclose(calib.reflectance, 1.0, atol=1e-9)
        assert np.all(np.abs(np.linalg.norm(calib.normals, axis=1) - 1) < 1e-9)

    def test_two_materials_ratio(self):
        sweep = plane_sweep(rho_fn=lambda a: 0.2 if a < np.pi else 0.4)
        calib, _ = calibrate_sweep(sweep)
        lo = calib.reflectance[np.isclose(calib.reflectance, calib.reflectance.min())]
        hi = calib.reflectance[np.isclose(calib.reflectance, calib.reflectance.max())]
        assert hi[0] == pytest.approx(2 * lo[0], rel=1e-9)

    def test_collinear_sweep_yields_nothing(self):
        # all points on one line through space: every neighborhood degenerate
        t = np.linspace(1, 2, 30)
        pos = np.stack([t, t, np.full_like(t, 1.0)], axis=1)
        sweep_args = dict(
            intensity=np.full(30, 0.5),
            ring=np.repeat(np.arange(3), 10),
            azimuth_index=np.tile(np.arange(10), 3),
        )
        from lrsgs.lidar import LidarSweep

        calib, diag = calibrate_sweep(LidarSweep(pos, **sweep_args))
        assert len(calib) == 0
        assert diag.dropped_degenerate + diag.dropped_isolated == 30

    def test_empty_raises(self):
        from lrsgs.lidar import LidarSweep

        with pytest.raises(EmptySweep):
            calibrate_sweep(LidarSweep(np.zeros((0, 3)), [], [], []))

    @settings(max_examples=20, deadline=None)
    @given(st.floats(min_value=0.05, max_value=50.0))
    def test_intensity_scale_equivariance(self, k):
        sweep = plane_sweep(rho_fn=lambda a: 0.3 + 0.2 * np.sin(a))
        scaled = plane_sweep(rho_fn=lambda a: 0.3 + 0.2 * np.sin(a))
        scaled.intensity = scaled.intensity * k
        ref, _ = calibrate_sweep(sweep)
        got, _ = calibrate_sweep(scaled)
        np.testing.assert_allclose(got.reflectance, ref.reflectance, atol=1e-9)


def single_point_sweep(points, refl=None):
    n = len(points)
    return CalibratedSweep(
        points, refl if refl is not None else np.full(n, 0.5),
        np.tile([0, 0, -1.0], (n, 1)), np.ones(n), np.zeros(n, np.int64), np.arange(n))


class TestProjectToCamera:
    def test_principal_ray(self):
        cam = make_camera()
        refl, depth = project_to_camera(single_point_sweep(np.array([[0, 0, 5.0]])), cam)
        assert refl.valid_mask[32, 32]
        assert depth.values[32, 32] == pytest.approx(5.0)
        assert refl.values[32, 32] == pytest.approx(0.5)

    def test_nearest_wins(self):
        cam = make_camera()
        pts = np.array([[0, 0, 7.0], [0, 0, 3.0]])
        refl, depth = project_to_camera(single_point_sweep(pts, np.array([0.2, 0.9])), cam)
        assert depth.values[32, 32] == pytest.approx(3.0)
        assert refl.values[32, 32] == pytest.approx(0.9)
        assert refl.point_index[32, 32] == 1

    def test_behind_camera_dropped(self):
        cam = make_camera()
        refl, depth = project_to_camera(single_point_sweep(np.array([[0, 0, -1.0]])), cam)
        assert not refl.valid_mask.any()
        assert not depth.valid_mask.any()

    def test_order_independent(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform([-1, -1, 2], [1, 1, 8], size=(200, 3))
        cam = make_camera()
        a = project_to_camera(single_point_sweep(pts), cam)
        perm = rng.permutation(200)
        b = project_to_camera(single_point_sweep(pts[perm]), cam)
        np.testing.assert_array_equal(a[1].values, b[1].values)
        np.testing.assert_array_equal(a[0].valid_mask, b[0].valid_mask)

    def test_unprojection_roundtrip(self):
        cam = make_camera()
        # points constructed to hit pixel centers exactly
        us, vs, zs = np.array([10, 40, 63]), np.array([5, 32, 60]), np.array([2.0, 4.0, 7.5])
        pts = cam.unproject(us, vs, zs)
        refl, depth = project_to_camera(single_point_sweep(pts), cam)
        for u, v, z, p in zip(us, vs, zs, pts):
            assert depth.valid_mask[v, u]
            rec = cam.unproject(u, v, depth.values[v, u])
            np.testing.assert_allclose(rec, p, atol=1e-6)


class TestPixelReflectanceGradient:
    def grid_points(self, h, w, spacing=1.0):
        vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
        return np.stack([uu * spacing, vv * spacing, np.zeros_like(uu)], axis=-1)

    def test_uniform_region_zero(self):
        mask = np.ones((6, 6), dtype=bool)
        img = SparseImage(np.full((6, 6), 0.4), mask)
        g = pixel_reflectance_gradient(img, self.grid_points(6, 6))
        np.testing.assert_array_equal(g.values, 0.0)

    def test_isolated_pixel_zero(self):
        mask = np.zeros((7, 7), dtype=bool)
        mask[3, 3] = True
        img = SparseImage(np.where(mask, 1.0, 0.0), mask)
        g = pixel_reflectance_gradient(img, self.grid_points(7, 7))
        assert g.values[3, 3] == 0.0
        assert g.valid_mask[3, 3]

    def test_single_horizontal_term(self):
        # I_i=1, right neighbor 0 at 3D distance 2, no vertical neighbor -> 0.5
        mask = np.zeros((3, 4), dtype=bool)
        mask[1, 1] = mask[1, 2] = True
        vals = np.zeros((3, 4))
        vals[1, 1] = 1.0
        img = SparseImage(vals, mask)
        g = pixel_reflectance_gradient(img, self.grid_points(3, 4, spacing=2.0))
        assert g.values[1, 1] == pytest.approx(0.5, abs=1e-12)

    def test_constant_valid_pixels_zero(self):
        rng = np.random.default_rng(11)
        mask = rng.random((16, 16)) < 0.4
        img = SparseImage(np.where(mask, 0.7, 0.0), mask)
        g = pixel_reflectance_gradient(img, self.grid_points(16, 16))
        np.testing.assert_array_equal(g.values[mask], 0.0)


class TestSparseImageIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        mask = rng.random((20, 30)) < 0.5
        img = SparseImage(np.where(mask, rng.random((20, 30)), 0.0), mask)
        path = tmp_path / "refl.pfm"
        img.save(path)
        back = SparseImage.load(path)
        np.testing.assert_allclose(back.values, img.values.astype(np.float32))
        np.testing.assert_array_equal(back.valid_mask, img.valid_mask)


class TestCameraFileIO:
    def test_roundtrip(self, tmp_path):
        ext = RigidTransform.from_rt(
            np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0.0]]), [0.1, -0.2, 0.3])
        cam = make_camera(f=123.5, cx=31.25, cy=30.75, extrinsics=ext)
        path = tmp_path / "cam.txt"
        cam.save(path)
        back = CameraModel.load(path)
        np.testing.assert_array_equal(back.k, cam.k)
        np.testing.assert_array_equal(back.extrinsics.matrix, cam.extrinsics.matrix)
        assert (back.width, back.height) == (cam.width, cam.height)
