"""Pinhole geometry against an independent homogeneous-matrix oracle."""

import numpy as np
import pytest

from mvpolicy.camera import (
    Intrinsics, Extrinsics, CameraModel,
    InvalidDepthError, BehindCameraError, CalibrationError,
    unproject, project, unproject_map, look_at_extrinsics, save_rig, load_rig,
)


def identity_cam(width=8, height=8):
    return CameraModel(Intrinsics(1.0, 1.0, 0.0, 0.0),
                       Extrinsics(np.eye(4)), width, height)


def oracle_unproject(pixel, depth, fx, fy, cx, cy, ext_rows):
    """Pure-python reimplementation: 3x3 adjugate inverse + 4x4 multiply."""
    k = [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]
    det = (k[0][0] * (k[1][1] * k[2][2] - k[1][2] * k[2][1])
           - k[0][1] * (k[1][0] * k[2][2] - k[1][2] * k[2][0])
           + k[0][2] * (k[1][0] * k[2][1] - k[1][1] * k[2][0]))
    adj = [[k[1][1] * k[2][2] - k[1][2] * k[2][1],
            k[0][2] * k[2][1] - k[0][1] * k[2][2],
            k[0][1] * k[1][2] - k[0][2] * k[1][1]],
           [k[1][2] * k[2][0] - k[1][0] * k[2][2],
            k[0][0] * k[2][2] - k[0][2] * k[2][0],
            k[0][2] * k[1][0] - k[0][0] * k[1][2]],
           [k[1][0] * k[2][1] - k[1][1] * k[2][0],
            k[0][1] * k[2][0] - k[0][0] * k[2][1],
            k[0][0] * k[1][1] - k[0][1] * k[1][0]]]
    hom = [pixel[0], pixel[1], 1.0]
    ray = [sum(adj[i][j] * hom[j] for j in range(3)) / det for i in range(3)]
    cam_pt = [depth * ray[i] for i in range(3)] + [1.0]
    return [sum(ext_rows[i][j] * cam_pt[j] for j in range(4)) for i in range(3)]


def random_camera(rng):
    fx, fy = rng.uniform(80, 300, size=2)
    cx, cy = rng.uniform(50, 80, size=2)
    ext = look_at_extrinsics(rng.uniform(-1, 1, size=3) + [0, 0, 1.5],
                             rng.uniform(-0.2, 0.2, size=3))
    return CameraModel(Intrinsics(fx, fy, cx, cy), ext, 128, 128)


class TestUnproject:
    def test_identity_camera_optical_axis(self):
        np.testing.assert_allclose(
            unproject((0.0, 0.0), 1.0, identity_cam()), [0.0, 0.0, 1.0], atol=0)

    def test_translation_composition(self):
        ext = np.eye(4)
        ext[2, 3] = -1.0
        cam = CameraModel(Intrinsics(1.0, 1.0, 0.0, 0.0), Extrinsics(ext), 8, 8)
        np.testing.assert_allclose(unproject((0.0, 0.0), 1.0, cam),
                                   [0.0, 0.0, 0.0], atol=1e-15)

    def test_against_independent_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            cam = random_camera(rng)
            k = cam.intrinsics
            rows = cam.extrinsics.matrix.tolist()
            for _ in range(100):
                px = rng.uniform(0, 128, size=2)
                d = rng.uniform(0.2, 3.0)
                got = unproject(px, d, cam)
                ref = oracle_unproject(px, d, k.fx, k.fy, k.cx, k.cy, rows)
                assert np.max(np.abs(got - np.array(ref))) < 1e-9

    def test_invalid_depth(self):
        with pytest.raises(InvalidDepthError):
            unproject((0.0, 0.0), 0.0, identity_cam())
        with pytest.raises(InvalidDepthError):
            unproject((0.0, 0.0), -1.0, identity_cam())

    def test_depth_scaling_homogeneity(self):
        rng = np.random.default_rng(5)
        cam = random_camera(rng)
        inv = cam.extrinsics.inverse()
        for _ in range(20):
            px = rng.uniform(0, 128, size=2)
            d = rng.uniform(0.2, 2.0)
            s = rng.uniform(0.5, 2.0)
            p1 = np.append(unproject(px, d, cam), 1.0)
            p2 = np.append(unproject(px, s * d, cam), 1.0)
            c1 = (inv @ p1)[:3]
            c2 = (inv @ p2)[:3]
            np.testing.assert_allclose(c2, s * c1, rtol=1e-12, atol=1e-12)


class TestProject:
    def test_round_trip(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(10):
            cam = random_camera(rng)
            for _ in range(100):
                px = rng.uniform(0, 128, size=2)
                d = rng.uniform(0.2, 3.0)
                point = unproject(px, d, cam)
                (px2, d2) = project(point, cam)
                worst = max(worst, abs(px2[0] - px[0]), abs(px2[1] - px[1]),
                            abs(d2 - d))
        assert worst < 1e-6

    def test_optical_axis_point(self):
        (px, d) = project([0.0, 0.0, 2.0], identity_cam())
        assert px == pytest.approx((0.0, 0.0)) and d == pytest.approx(2.0)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project([0.0, 0.0, -1.0], identity_cam())


class TestUnprojectMap:
    def test_constant_depth_identity_camera(self):
        cam = identity_cam(4, 4)
        pts, valid = unproject_map(np.full((4, 4), 2.5), cam)
        assert valid.all()
        np.testing.assert_allclose(pts[..., 2], 2.5)

    def test_matches_per_pixel_unproject(self):
        rng = np.random.default_rng(2)
        cam = random_camera(rng)
        depth = rng.uniform(0.5, 2.0, size=(cam.height, cam.width))
        pts, _ = unproject_map(depth, cam)
        for _ in range(100):
            i = rng.integers(0, cam.height)
            j = rng.integers(0, cam.width)
            ref = unproject((j + 0.5, i + 0.5), depth[i, j], cam)
            np.testing.assert_array_equal(pts[i, j], ref)

    def test_brute_force_loop_oracle_4x4(self):
        rng = np.random.default_rng(3)
        cam = CameraModel(Intrinsics(2.0, 3.0, 1.5, 2.5),
                          look_at_extrinsics([0.3, -0.4, 1.0], [0, 0, 0]), 4, 4)
        depth = rng.uniform(0.5, 2.0, size=(4, 4))
        depth[1, 2] = 0.0
        pts, valid = unproject_map(depth, cam)
        assert not valid[1, 2] and np.array_equal(pts[1, 2], [0, 0, 0])
        k = cam.intrinsics
        rows = cam.extrinsics.matrix.tolist()
        for i in range(4):
            for j in range(4):
                if depth[i, j] <= 0:
                    continue
                ref = oracle_unproject((j + 0.5, i + 0.5), depth[i, j],
                                       k.fx, k.fy, k.cx, k.cy, rows)
                assert np.max(np.abs(pts[i, j] - np.array(ref))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            unproject_map(np.ones((3, 5)), identity_cam(4, 4))


class TestRigidInvariance:
    def test_pairwise_distances_independent_of_extrinsics(self):
        rng = np.random.default_rng(4)
        k = Intrinsics(150.0, 150.0, 64.0, 64.0)
        cam_id = CameraModel(k, Extrinsics(np.eye(4)), 128, 128)
        cam_rt = CameraModel(k, look_at_extrinsics([0.9, -0.8, 1.1], [0, 0, 0]),
                             128, 128)
        pix = rng.uniform(0, 128, size=(50, 2))
        dep = rng.uniform(0.3, 2.0, size=50)
        a = np.array([unproject(p, d, cam_id) for p, d in zip(pix, dep)])
        b = np.array([unproject(p, d, cam_rt) for p, d in zip(pix, dep)])
        da = np.linalg.norm(a[:, None] - a[None], axis=-1)
        db = np.linalg.norm(b[:, None] - b[None], axis=-1)
        assert np.max(np.abs(da - db)) < 1e-9


class TestValidation:
    def test_nonorthonormal_rotation_rejected(self):
        bad = np.eye(4)
        bad[0, 0] = 2.0
        with pytest.raises(CalibrationError):
            Extrinsics(bad)

    def test_reflection_rejected(self):
        bad = np.diag([-1.0, 1.0, 1.0, 1.0])
        with pytest.raises(CalibrationError):
            Extrinsics(bad)

    def test_bad_focal(self):
        with pytest.raises(CalibrationError):
            Intrinsics(0.0, 1.0, 0.0, 0.0)


class TestRigIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        cams = [random_camera(rng) for _ in range(3)]
        path = tmp_path / "rig.txt"
        save_rig(path, cams)
        loaded = load_rig(path)
        assert len(loaded) == 3
        for a, b in zip(cams, loaded):
            assert a.intrinsics == b.intrinsics
            np.testing.assert_array_equal(a.extrinsics.matrix, b.extrinsics.matrix)
            assert (a.width, a.height) == (b.width, b.height)

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "rig.txt"
        p.write_text("views 0\n")
        with pytest.raises(CalibrationError):
            load_rig(p)
