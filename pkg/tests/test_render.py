"""Rendering, viewpoint sampling, normals, back-projection, image I/O."""

import numpy as np
import pytest

from rgbdpose.geometry import Pose
from rgbdpose.render import (
    CameraIntrinsics,
    DepthImage,
    TriangleMesh,
    backproject,
    box_mesh,
    cylinder_mesh,
    default_intrinsics,
    fibonacci_directions,
    inplane_angles,
    load_depth_png,
    load_gray_png,
    load_mask_png,
    load_obj,
    normals_from_depth,
    render_depth,
    sample_viewpoints,
    save_depth_png,
    save_gray_png,
    save_mask_png,
    save_obj,
    shade_intensity,
    smooth_depth,
    sphere_mesh,
)

CAM = default_intrinsics()


def square_mesh(side):
    """Two coplanar triangles in the z=0 plane, centered at the origin."""
    h = side / 2
    v = np.array([[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0.0]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def frontal_pose(z):
    return Pose(np.eye(3), np.array([0.0, 0.0, z]))


class TestIntrinsics:
    def test_defaults(self):
        assert (CAM.fx, CAM.fy, CAM.cx, CAM.cy) == (572.0, 572.0, 320.0, 240.0)
        assert (CAM.width, CAM.height) == (640, 480)

    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=0.0, fy=572.0, cx=320, cy=240, width=640, height=480)

    def test_rejects_outside_principal_point(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=572, fy=572, cx=700, cy=240, width=640, height=480)


class TestViewpointSampling:
    def test_pose_count(self):
        poses = sample_viewpoints(216, (-60, 60, 10), [0.4, 0.5, 0.6, 0.7, 0.8])
        assert len(poses) == 216 * 13 * 5

    def test_inplane_range_is_inclusive(self):
        assert list(inplane_angles(-60, 60, 10)) == list(range(-60, 70, 10))
        assert list(inplane_angles(0, 0, 10)) == [0]

    def test_origin_lands_on_optical_axis(self):
        # object origin at (0, 0, radius) in the camera frame, exactly
        for pose in sample_viewpoints(12, (-60, 60, 30), [0.4, 0.7]):
            assert abs(pose.translation[0]) < 1e-12
            assert abs(pose.translation[1]) < 1e-12
            assert pose.translation[2] in (0.4, 0.7) or \
                abs(pose.translation[2] - 0.4) < 1e-12 or \
                abs(pose.translation[2] - 0.7) < 1e-12

    def test_camera_distance_equals_radius(self):
        for pose in sample_viewpoints(8, (0, 0, 1), [0.55]):
            assert np.linalg.norm(pose.translation) == pytest.approx(0.55, abs=1e-12)

    def test_inplane_rolls_share_viewpoint(self):
        # consecutive poses for one viewpoint differ by a roll about the
        # optical axis: R_k R_0^T must be a rotation about z
        poses = sample_viewpoints(4, (-60, 60, 10), [0.5])
        base = poses[0].rotation
        for pose in poses[1:13]:
            rel = pose.rotation @ base.T
            axis_z = abs(rel[2, 2])
            assert axis_z == pytest.approx(1.0, abs=1e-9)

    def test_fibonacci_spacing_quality(self):
        # min pairwise separation stays above half the ideal uniform spacing
        d = fibonacci_directions(216)
        dots = np.clip(d @ d.T, -1.0, 1.0)
        np.fill_diagonal(dots, -1.0)
        min_angle = np.arccos(dots.max())
        assert min_angle >= 0.5 * np.sqrt(4 * np.pi / 216)

    def test_fibonacci_covers_both_hemispheres(self):
        d = fibonacci_directions(50)
        assert (d[:, 2] > 0.5).any() and (d[:, 2] < -0.5).any()
        assert np.abs(np.linalg.norm(d, axis=1) - 1).max() < 1e-12

    def test_rejects_degenerate_requests(self):
        with pytest.raises(ValueError):
            sample_viewpoints(2, (0, 0, 1), [0.5])
        with pytest.raises(ValueError):
            sample_viewpoints(16, (0, 0, 1), [])
        with pytest.raises(ValueError):
            sample_viewpoints(16, (0, 0, 1), [-0.5])


class TestRenderDepth:
    def test_frontal_square_depth_and_area(self):
        # square of side 0.4 m at z=1: every covered pixel reads exactly 1.0,
        # and coverage matches the pinhole-projected extent
        depth, mask = render_depth(square_mesh(0.4), CAM, frontal_pose(1.0))
        assert mask.sum() > 0
        np.testing.assert_allclose(depth.depth[mask], 1.0, atol=1e-6)
        # u spans 320 +- 0.2*572 -> integer samples 206..434 = 229 per row
        assert mask.sum() == 229 * 229

    def test_sphere_center_depth(self):
        # unit-diameter sphere centered at z=1: nearest surface point 0.5 m
        depth, mask = render_depth(sphere_mesh(0.5, 3), CAM, frontal_pose(1.0))
        assert mask[240, 320]
        assert depth.depth[240, 320] == pytest.approx(0.5, abs=2e-3)

    def test_mask_equals_valid_depth(self):
        depth, mask = render_depth(sphere_mesh(0.1, 2), CAM, frontal_pose(0.8))
        assert np.array_equal(mask, depth.valid_mask())

    def test_object_behind_camera_renders_empty(self):
        depth, mask = render_depth(box_mesh(0.1, 0.1, 0.1), CAM, frontal_pose(-2.0))
        assert mask.sum() == 0
        assert (depth.depth == 0).all()

    def test_nearer_surface_wins(self):
        # two squares on the same rays: z-buffer keeps the closer one
        near = square_mesh(0.3)
        far_v = near.vertices + np.array([0, 0, 0.5])
        both = TriangleMesh(np.vstack([near.vertices, far_v]),
                            np.vstack([near.triangles, near.triangles + 4]))
        depth, mask = render_depth(both, CAM, frontal_pose(1.0))
        np.testing.assert_allclose(depth.depth[mask], 1.0, atol=1e-6)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        R = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        if np.linalg.det(R) < 0:
            R[:, 0] *= -1
        pose = Pose(R, np.array([0.03, -0.02, 0.7]))
        d1, m1 = render_depth(box_mesh(0.1, 0.15, 0.08), CAM, pose)
        d2, m2 = render_depth(box_mesh(0.1, 0.15, 0.08), CAM, pose)
        assert np.array_equal(d1.depth, d2.depth)
        assert np.array_equal(m1, m2)

    def test_shared_edge_pixels_claimed_once(self):
        # the two triangles of a square share a diagonal; watertight fill
        # means no pixel inside the square is missed
        depth, mask = render_depth(square_mesh(0.2), CAM, frontal_pose(0.5))
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        interior = mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        assert interior.all()

    def test_cylinder_silhouette_width(self):
        depth, mask = render_depth(cylinder_mesh(0.06, 0.1, 96), CAM,
                                   frontal_pose(0.6))
        cols = np.where(mask.any(axis=0))[0]
        width_px = cols[-1] - cols[0] + 1
        # the near rim at z = 0.6 - 0.05 sets the silhouette
        expected = 2 * 0.06 * CAM.fx / 0.55
        assert width_px == pytest.approx(expected, abs=3)


class TestBackproject:
    def test_principal_point_maps_to_axis(self):
        d = np.zeros((480, 640))
        d[240, 320] = 2.0
        cloud = backproject(DepthImage.from_array(d), CAM)
        pt = cloud.points.reshape(480, 640, 3)[240, 320]
        np.testing.assert_allclose(pt, [0.0, 0.0, 2.0], atol=0)

    def test_hand_computed_pixel(self):
        d = np.zeros((480, 640))
        d[100, 500] = 1.5
        cloud = backproject(DepthImage.from_array(d), CAM)
        pt = cloud.points.reshape(480, 640, 3)[100, 500]
        np.testing.assert_allclose(
            pt, [(500 - 320) * 1.5 / 572, (100 - 240) * 1.5 / 572, 1.5],
            rtol=0, atol=1e-15)
        assert cloud.n_valid == 1

    def test_invalid_pixels_become_sentinels(self):
        d = np.zeros((4, 4))
        d[1, 2] = 0.9
        cloud = backproject(DepthImage.from_array(d),
                            CameraIntrinsics(100, 100, 2, 2, 4, 4))
        assert cloud.organized_dims == (4, 4)
        assert cloud.n_valid == 1
        assert (cloud.points[~cloud.valid_mask()] == 0).all()

    def test_extra_mask_restricts_output(self):
        d = np.full((4, 4), 1.0)
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        cloud = backproject(DepthImage.from_array(d),
                            CameraIntrinsics(100, 100, 2, 2, 4, 4), mask)
        assert cloud.n_valid == 1

    def test_render_backproject_round_trip(self):
        # every back-projected pixel of a rendered box lies on the box surface
        rng = np.random.default_rng(11)
        R = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        if np.linalg.det(R) < 0:
            R[:, 0] *= -1
        pose = Pose(R, np.array([0.05, -0.03, 0.8]))
        half = np.array([0.05, 0.075, 0.04])
        depth, mask = render_depth(box_mesh(*(2 * half)), CAM, pose)
        cloud = backproject(depth, CAM, mask)
        p_obj = pose.inverse().apply(cloud.valid_points())
        q = np.abs(p_obj) - half
        sdf = (np.linalg.norm(np.maximum(q, 0.0), axis=1)
               + np.minimum(q.max(axis=1), 0.0))
        frac_on_surface = (np.abs(sdf) <= 2e-3).mean()
        assert frac_on_surface >= 0.99


class TestNormalsFromDepth:
    def test_frontal_plane_faces_camera(self):
        depth, _ = render_depth(square_mesh(0.4), CAM, frontal_pose(1.0))
        nm = normals_from_depth(depth, CAM)
        assert nm.valid.sum() > 1000
        errs = np.linalg.norm(nm.normals[nm.valid] - [0, 0, -1.0], axis=1)
        assert errs.max() < 5e-2

    def test_tilted_plane_matches_analytic_normal(self):
        ang = np.radians(30)
        c, s = np.cos(ang), np.sin(ang)
        Rx = np.array([[1, 0, 0], [0, c, -s], [0, s, c.item()]])
        depth, _ = render_depth(square_mesh(0.4), CAM,
                                Pose(Rx, np.array([0, 0, 1.0])))
        nm = normals_from_depth(depth, CAM)
        expected = Rx @ np.array([0, 0, -1.0])
        errs = np.linalg.norm(nm.normals[nm.valid] - expected, axis=1)
        assert nm.valid.sum() > 1000
        assert errs.max() < 5e-2

    def test_normals_are_unit_and_camera_facing(self):
        depth, _ = render_depth(sphere_mesh(0.3, 2), CAM, frontal_pose(1.0))
        nm = normals_from_depth(depth, CAM)
        v = nm.normals[nm.valid]
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-6)
        assert (v[:, 2] < 0).all()

    def test_discontinuity_invalidates_edge_pixels(self):
        d = np.full((20, 20), 0.5)
        d[:, 10:] = 0.8  # 30 cm step, far above the 2 cm threshold
        nm = normals_from_depth(DepthImage.from_array(d),
                                CameraIntrinsics(100, 100, 10, 10, 20, 20))
        assert not nm.valid[:, 9:11].any()
        assert nm.valid[5, 5] and nm.valid[5, 15]

    def test_pixels_next_to_invalid_depth_are_invalid(self):
        d = np.full((10, 10), 0.5)
        d[4, 4] = 0.0
        nm = normals_from_depth(DepthImage.from_array(d),
                                CameraIntrinsics(100, 100, 5, 5, 10, 10))
        assert not nm.valid[4, 4]
        assert not (nm.valid[4, 3] or nm.valid[4, 5]
                    or nm.valid[3, 4] or nm.valid[5, 4])
        assert nm.valid[1, 1]

    def test_image_border_is_invalid(self):
        d = np.full((8, 8), 0.5)
        nm = normals_from_depth(DepthImage.from_array(d),
                                CameraIntrinsics(100, 100, 4, 4, 8, 8))
        assert not nm.valid[0, :].any() and not nm.valid[-1, :].any()
        assert not nm.valid[:, 0].any() and not nm.valid[:, -1].any()


class TestShading:
    def test_head_on_light_gives_full_brightness(self):
        depth, _ = render_depth(square_mesh(0.4), CAM, frontal_pose(1.0))
        nm = normals_from_depth(depth, CAM)
        img = shade_intensity(nm, np.array([0.0, 0.0, -1.0]))
        assert (img[nm.valid] == 255).all()
        assert (img[~nm.valid] == 0).all()

    def test_hand_computed_lambert_value(self):
        n = np.zeros((3, 3, 3))
        n[1, 1] = [0.0, 0.0, -1.0]
        valid = np.zeros((3, 3), dtype=bool)
        valid[1, 1] = True
        from rgbdpose.render import NormalMap
        nm = NormalMap(3, 3, n, valid)
        # light at 60 degrees off the normal: 255 * cos(60) = 127.5 -> 128
        light = np.array([0.0, np.sin(np.radians(60)), -np.cos(np.radians(60))])
        img = shade_intensity(nm, light)
        assert img[1, 1] == 128

    def test_sphere_shading_falls_off_toward_silhouette(self):
        depth, _ = render_depth(sphere_mesh(0.3, 3), CAM, frontal_pose(1.0))
        nm = normals_from_depth(depth, CAM)
        img = shade_intensity(nm, np.array([0.0, 0.0, -1.0]))
        center = int(img[240, 320])
        cols = np.where(nm.valid[240])[0]
        near_edge = int(img[240, cols[2]])
        assert center > near_edge


class TestSmoothDepth:
    def test_constant_depth_is_unchanged(self):
        d = np.full((9, 9), 0.7)
        out = smooth_depth(DepthImage.from_array(d))
        np.testing.assert_allclose(out.depth, 0.7, atol=1e-12)

    def test_hand_computed_center_value(self):
        d = np.full((5, 5), 0.5)
        d[2, 2] = 0.512  # within the 2 cm discontinuity threshold
        out = smooth_depth(DepthImage.from_array(d), sigma_px=1.0, radius_px=1)
        ws, wd = np.exp(-0.5), np.exp(-1.0)
        expected = (0.512 + 4 * (ws + wd) * 0.5) / (1 + 4 * (ws + wd))
        assert out.depth[2, 2] == pytest.approx(expected, abs=1e-12)
        # far corner only sees flat neighbors
        assert out.depth[0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_step_edge_is_preserved(self):
        d = np.full((10, 10), 0.5)
        d[:, 5:] = 0.8  # jump above the threshold: no cross-edge mixing
        out = smooth_depth(DepthImage.from_array(d))
        np.testing.assert_allclose(out.depth[:, :5], 0.5, atol=1e-12)
        np.testing.assert_allclose(out.depth[:, 5:], 0.8, atol=1e-12)

    def test_invalid_pixels_stay_invalid(self):
        d = np.full((6, 6), 0.5)
        d[3, 3] = 0.0
        out = smooth_depth(DepthImage.from_array(d))
        assert out.depth[3, 3] == 0.0
        assert (out.valid_mask() == (d > 0)).all()


class TestMeshes:
    def test_box_diameter(self):
        assert box_mesh(0.1, 0.2, 0.3).diameter() == pytest.approx(
            np.sqrt(0.14), abs=1e-12)

    def test_sphere_diameter_and_radius(self):
        m = sphere_mesh(0.25, 3)
        assert m.diameter() == pytest.approx(0.5, abs=1e-9)
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 0.25,
                                   atol=1e-12)

    def test_cylinder_diameter(self):
        m = cylinder_mesh(0.05, 0.2, 48)
        assert m.diameter() == pytest.approx(np.sqrt(0.1**2 + 0.2**2), abs=1e-9)

    def test_rejects_empty_and_out_of_range(self):
        with pytest.raises(ValueError):
            TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3)))
        with pytest.raises(ValueError):
            TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


class TestFileIO:
    def test_obj_round_trip(self, tmp_path):
        m = box_mesh(0.1, 0.2, 0.3)
        save_obj(m, tmp_path / "box.obj")
        m2 = load_obj(tmp_path / "box.obj")
        np.testing.assert_array_equal(m.vertices, m2.vertices)
        np.testing.assert_array_equal(m.triangles, m2.triangles)

    def test_obj_quads_are_fan_triangulated(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
        m = load_obj(p)
        np.testing.assert_array_equal(m.triangles, [[0, 1, 2], [0, 2, 3]])

    def test_obj_negative_indices(self, tmp_path):
        p = tmp_path / "neg.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
        m = load_obj(p)
        np.testing.assert_array_equal(m.triangles, [[0, 1, 2]])

    def test_depth_png_round_trip_millimeter_grid(self, tmp_path):
        d = np.zeros((6, 8))
        d[2, 3] = 0.514
        d[4, 1] = 1.2
        save_depth_png(DepthImage.from_array(d), tmp_path / "d.png")
        d2 = load_depth_png(tmp_path / "d.png")
        np.testing.assert_array_equal(d2.depth, d)

    def test_depth_png_quantizes_to_half_millimeter(self, tmp_path):
        d = np.full((4, 4), 0.7773333)
        save_depth_png(DepthImage.from_array(d), tmp_path / "d.png")
        d2 = load_depth_png(tmp_path / "d.png")
        assert np.abs(d2.depth - d).max() <= 5e-4 + 1e-12

    def test_mask_and_gray_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        mask = rng.random((16, 16)) > 0.5
        save_mask_png(mask, tmp_path / "m.png")
        assert np.array_equal(load_mask_png(tmp_path / "m.png"), mask)
        img = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        save_gray_png(img, tmp_path / "g.png")
        assert np.array_equal(load_gray_png(tmp_path / "g.png"), img)
