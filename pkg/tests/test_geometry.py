import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from transdepth import diffcore as dc
from transdepth.data import GeneratorConfig, Primitive, SceneSpec, cast_rays, random_scene, render_scene
from transdepth.data.synthetic import CorruptionSpec
from transdepth.geometry import (OUT_OF_VIEW, CameraRig, DepthPlanes, Intrinsics, RelativePose,
                                 backproject, normals_from_depth, project, warp_coords,
                                 warp_feature_volume)


def rotation(ax, ay, az):
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


class TestTypes:
    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=-1, fy=1, cx=1, cy=1, width=4, height=4)
        with pytest.raises(ValueError):
            Intrinsics(fx=1, fy=1, cx=4, cy=1, width=4, height=4)

    def test_scaled_intrinsics(self):
        k = Intrinsics(100, 80, 31.5, 23.5, 64, 48).scaled(4)
        assert (k.fx, k.fy, k.cx, k.cy, k.width, k.height) == (25, 20, 31.5 / 4, 23.5 / 4, 16, 12)

    def test_rotation_must_be_orthonormal(self):
        with pytest.raises(ValueError):
            RelativePose(np.diag([1.0, 1.0, 1.0 + 1e-8]), np.zeros(3))
        with pytest.raises(ValueError):
            RelativePose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_planes_equally_spaced(self):
        d = DepthPlanes(0.3, 1.5, 45).depths
        assert d[0] == 0.3 and d[-1] == pytest.approx(1.5, abs=1e-15)
        assert np.ptp(np.diff(d)) < 1e-12

    def test_planes_invariants(self):
        with pytest.raises(ValueError):
            DepthPlanes(1.0, 0.5, 4)
        with pytest.raises(ValueError):
            DepthPlanes(0.3, 1.5, 1)


class TestWarp:
    def test_identity_rig_is_exact(self, intrinsics):
        rig = CameraRig.identity(intrinsics)
        u, v = np.meshgrid(np.arange(64.0), np.arange(48.0))
        for d in (0.3, 0.77, 12.0):
            coords = warp_coords(rig, d).data
            assert np.array_equal(coords[..., 0], u) and np.array_equal(coords[..., 1], v)

    def test_baseline_disparity(self, baseline_rig):
        coords = warp_coords(baseline_rig, 1.0).data
        u, v = np.meshgrid(np.arange(64.0), np.arange(48.0))
        assert np.abs(coords[..., 0] - (u + 10.0)).max() < 1e-8
        assert np.abs(coords[..., 1] - v).max() < 1e-8

    def test_behind_source_camera_reads_zero(self, intrinsics):
        rig = CameraRig(intrinsics, intrinsics, RelativePose(np.eye(3), np.array([0, 0, -2.0])))
        coords = warp_coords(rig, 1.0).data
        assert (coords == OUT_OF_VIEW).all()
        out = dc.bilinear_sample(np.ones((1, 48, 64)), coords).data
        assert (out == 0).all()

    @pytest.mark.parametrize("d", [0.0, -1.0])
    def test_nonpositive_depth(self, baseline_rig, d):
        with pytest.raises(ValueError):
            warp_coords(baseline_rig, d)

    @given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2),
           st.floats(-0.2, 0.2), st.floats(-0.05, 0.05), st.floats(0.4, 3.0))
    def test_reprojection_consistency(self, ax, ay, az, tx, ty, d):
        k_ref = Intrinsics(90, 95, 15.5, 11.5, 32, 24)
        k_src = Intrinsics(110, 105, 16.0, 12.0, 32, 24)
        pose = RelativePose(rotation(ax, ay, az), np.array([tx, ty, 0.02]))
        rig = CameraRig(k_ref, k_src, pose)
        v, u = np.mgrid[0:24, 0:32].astype(float)
        points = backproject(u, v, np.full(u.shape, d), k_ref)
        moved = pose.apply(points)
        direct = project(moved, k_src)
        front = moved[..., 2] > 0
        coords = warp_coords(rig, d).data
        assert np.abs(coords[front] - direct[front]).max() < 1e-8

    def test_feature_volume_identity_rig(self, rng, intrinsics, planes):
        f = rng.normal(size=(3, 12, 16))
        vol = warp_feature_volume(f, CameraRig.identity(intrinsics), planes, 4).data
        assert vol.shape == (3, planes.count, 12, 16)
        for n in range(planes.count):
            np.testing.assert_array_equal(vol[:, n], f)

    def test_feature_volume_constant(self, baseline_rig, planes):
        vol = warp_feature_volume(np.full((2, 12, 16), 0.7), baseline_rig, planes, 4).data
        inside = vol != 0
        assert inside.any()
        np.testing.assert_allclose(vol[inside], 0.7, atol=1e-12)

    def test_feature_grid_mismatch(self, baseline_rig, planes):
        with pytest.raises(ValueError):
            warp_feature_volume(np.ones((2, 10, 16)), baseline_rig, planes, 4)

    def test_checkerboard_aligns_at_true_depth(self):
        k = Intrinsics(80, 80, 31.5, 31.5, 64, 64)
        rig = CameraRig(k, k, RelativePose(np.eye(3), np.array([-0.1, 0.0, 0.0])))
        wall = Primitive("plane", (0, 0, 1.0), normal=(0, 0, -1.0), checker=0.03,
                         colors=((0.9, 0.9, 0.9), (0.1, 0.1, 0.1)))
        ball = Primitive("sphere", (0.0, 0.0, 0.5), (0.01,), transparent=True)
        spec = SceneSpec((wall, ball), rig, CorruptionSpec(0, 0, 0))
        ref = render_scene(spec, "ref").rgb
        src = render_scene(spec, "src").rgb
        planes = DepthPlanes(0.6, 1.4, 9)  # includes 1.0
        vol = warp_feature_volume(src, rig, planes, 1).data
        cost = ((ref[:, None] - vol) / 2) ** 2
        valid = (vol != 0).all(axis=(0, 1))
        valid[28:36, 28:36] = False  # the small sphere
        per_plane = cost[:, :, valid].mean(axis=(0, 2))
        assert int(per_plane.argmin()) == 4
        assert per_plane[4] < 1e-3 < np.delete(per_plane, 4).min()

    def test_warp_gradient_in_depth(self, baseline_rig):
        d = dc.Tensor(np.array(1.0), requires_grad=True)
        with dc.Tape() as tape:
            loss = dc.sum(warp_coords(baseline_rig, d)[..., 0])
        g = dc.backward(tape, loss)[d]
        # du/dd = -fx b / d^2 at every pixel
        assert float(g) == pytest.approx(-100 * 0.1 * 64 * 48, rel=1e-12)


class TestEpipolar:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_rendered_pairs_are_consistent(self, seed):
        spec = random_scene(GeneratorConfig(), seed)
        ref = render_scene(spec, "ref")
        k_ref, k_src = spec.rig.ref_intrinsics, spec.rig.src_intrinsics
        v, u = np.nonzero(ref.mask)
        pts = backproject(u.astype(float), v.astype(float), ref.depth[v, u], k_ref)
        moved = spec.rig.ref_to_src.apply(pts)
        uv = project(moved, k_src)
        inside = ((uv[:, 0] >= 0) & (uv[:, 0] <= k_src.width - 1)
                  & (uv[:, 1] >= 0) & (uv[:, 1] <= k_src.height - 1))
        seen = cast_rays(spec, "src", uv[inside, 0], uv[inside, 1])
        z = moved[inside, 2]
        # every point is either seen at its own depth or hidden by something
        # nearer (other objects, or the object's own limb); never seen behind
        assert (seen <= z + 1e-3).all()
        consistent = np.abs(seen - z) < 1e-3
        assert consistent.mean() > 0.8


class TestNormals:
    def test_constant_depth(self, intrinsics):
        n = normals_from_depth(np.full((48, 64), 0.8), intrinsics).data
        assert np.array_equal(n[0], np.zeros((48, 64))) and np.array_equal(n[1], np.zeros((48, 64)))
        assert np.array_equal(n[2], np.full((48, 64), -1.0))

    def test_tilted_plane(self, intrinsics):
        # plane z = 1 + x, tilted 45 degrees about the vertical axis
        rx, _ = intrinsics.rays()
        depth = 1.0 / (1.0 - rx)
        n = normals_from_depth(depth, intrinsics).data
        expected = np.array([1.0, 0.0, -1.0]) / np.sqrt(2)
        err = np.abs(n[:, :-1, :-1] - expected[:, None, None]).max()
        assert err < 1e-6

    def test_spike_is_finite_unit(self, intrinsics):
        depth = np.full((48, 64), 1.0)
        depth[20, 30] = 5.0
        n = normals_from_depth(depth, intrinsics).data
        assert np.isfinite(n).all()
        np.testing.assert_allclose(np.linalg.norm(n, axis=0), 1.0, atol=1e-10)

    @given(st.integers(0, 10_000))
    def test_unit_length(self, seed):
        k = Intrinsics(20, 20, 3.5, 3.5, 8, 8)
        depth = np.random.default_rng(seed).uniform(0.5, 2.0, (8, 8))
        n = normals_from_depth(depth, k).data
        np.testing.assert_allclose(np.linalg.norm(n, axis=0), 1.0, atol=1e-10)
        assert (n[2] <= 0).all()

    def test_degenerate_pixel_defaults(self):
        # zero depth collapses the back-projected points onto the camera centre
        k = Intrinsics(20, 20, 1.5, 1.5, 4, 4)
        depth = dc.Tensor(np.zeros((4, 4)), requires_grad=True)
        with dc.Tape() as tape:
            n = normals_from_depth(depth, k)
            loss = dc.sum(n)
        np.testing.assert_array_equal(n.data[2], -1.0)
        assert np.array_equal(dc.backward(tape, loss)[depth], np.zeros((4, 4)))
