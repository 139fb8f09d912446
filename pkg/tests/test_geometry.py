import numpy as np
import pytest

from edgeodom.geometry import (
    CameraIntrinsics,
    Pose,
    backproject,
    project,
    warp,
    warp_jacobian,
)


def random_pose(rng, max_angle=2.5, max_trans=1.0):
    w = rng.uniform(-1, 1, 3)
    w = w / np.linalg.norm(w) * rng.uniform(0, max_angle)
    t = rng.uniform(-max_trans, max_trans, 3)
    return Pose.exp(np.concatenate([t, w]))


class TestPose:
    def test_identity_compose(self):
        T = Pose.exp([0.1, -0.2, 0.3, 0.05, 0.1, -0.07])
        assert (Pose.identity() @ T).is_close(T)

    def test_inverse_composes_to_identity(self, rng):
        for _ in range(50):
            T = random_pose(rng)
            assert (T.inverse() @ T).is_close(Pose.identity(), tol=1e-9)

    def test_rotation_orthonormal(self, rng):
        for _ in range(50):
            T = random_pose(rng)
            assert np.allclose(T.R @ T.R.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(T.R) == pytest.approx(1.0, abs=1e-9)

    def test_exp_log_roundtrip(self, rng):
        for _ in range(200):
            xi = rng.uniform(-1, 1, 6)
            xi[3:] *= 3.0 / max(np.linalg.norm(xi[3:]) * 3.0, 1.0)  # angle < pi
            T = Pose.exp(xi)
            assert Pose.exp(T.log()).is_close(T, tol=1e-9)

    def test_log_exp_roundtrip_small(self, rng):
        for _ in range(100):
            xi = rng.uniform(-0.5, 0.5, 6)
            assert np.allclose(Pose.exp(xi).log(), xi, atol=1e-9)

    def test_renormalized_after_many_compositions(self, rng):
        T = Pose.identity()
        step = random_pose(rng, max_angle=0.05, max_trans=0.01)
        for _ in range(1000):
            T = T @ step
        T = T.renormalized()
        assert np.allclose(T.R @ T.R.T, np.eye(3), atol=1e-9)

    def test_near_pi_rotation_log(self):
        w = np.array([0.0, 0.0, np.pi - 1e-4])
        T = Pose.exp(np.concatenate([np.zeros(3), w]))
        assert np.allclose(T.log()[3:], w, atol=1e-6)


class TestProjection:
    def test_optical_axis_point(self, intr):
        pix, valid = project(np.array([0.0, 0.0, 1.0]), intr)
        assert valid
        assert pix == pytest.approx([319.5, 239.5])

    def test_offset_point(self, intr):
        pix, _ = project(np.array([0.1, 0.0, 1.0]), intr)
        assert pix == pytest.approx([372.0, 239.5])

    def test_zero_depth_rejected(self, intr):
        _, valid = project(np.array([0.3, 0.2, 0.0]), intr)
        assert not valid

    def test_backproject_principal_point(self, intr):
        assert backproject(np.array([319.5, 239.5]), 1.0, intr) == pytest.approx(
            [0.0, 0.0, 1.0]
        )
        assert backproject(np.array([319.5, 239.5]), 0.5, intr) == pytest.approx(
            [0.0, 0.0, 2.0]
        )

    def test_nonpositive_inverse_depth_raises(self, intr):
        with pytest.raises(ValueError):
            backproject(np.array([100.0, 100.0]), -0.1, intr)

    def test_roundtrip_property(self, intr, rng):
        pix = rng.uniform([5, 5], [intr.width - 5, intr.height - 5], size=(1000, 2))
        rho = rng.uniform(0.2, 5.0, 1000)
        back, valid = project(backproject(pix, rho, intr), intr)
        assert valid.all()
        assert np.abs(back - pix).max() < 1e-9


class TestWarp:
    def test_identity_warp(self, intr, rng):
        pix = rng.uniform([5, 5], [630, 470], size=(100, 2))
        rho = rng.uniform(0.2, 5.0, 100)
        out, valid = warp(pix, rho, Pose.identity(), intr)
        assert np.abs(out[valid] - pix[valid]).max() < 1e-9

    def test_pure_translation(self, intr):
        out, valid = warp(
            np.array([319.5, 239.5]), 1.0, Pose(np.eye(3), [0.1, 0.0, 0.0]), intr
        )
        assert valid
        assert out == pytest.approx([372.0, 239.5])

    def test_compositional_oracle(self, intr, rng):
        # warp must equal backproject -> transform -> project, step by step
        for _ in range(200):
            T = random_pose(rng, max_angle=0.3, max_trans=0.2)
            pix = rng.uniform([50, 50], [590, 430], size=2)
            rho = rng.uniform(0.3, 2.0, size=())
            out, valid = warp(pix, rho, T, intr)
            X = T.apply(backproject(pix, rho, intr))
            expect, vz = project(X, intr)
            if valid:
                assert out == pytest.approx(expect, abs=1e-9)

    def test_behind_camera_flagged(self, intr):
        T = Pose(np.eye(3), [0.0, 0.0, -5.0])
        _, valid = warp(np.array([319.5, 239.5]), 1.0, T, intr)
        assert not valid


class TestWarpJacobian:
    def test_translation_x_column_at_principal_point(self, intr):
        J = warp_jacobian(np.array([319.5, 239.5]), 1.0, Pose.identity(), intr)
        assert J[:, 0] == pytest.approx([525.0, 0.0])

    def test_optical_axis_rotation_no_motion(self, intr):
        J = warp_jacobian(np.array([319.5, 239.5]), 1.0, Pose.identity(), intr)
        assert J[:, 5] == pytest.approx([0.0, 0.0], abs=1e-12)

    def test_finite_difference_oracle(self, intr, rng):
        h = 1e-6
        worst = 0.0
        count = 0
        while count < 1000:
            T = random_pose(rng, max_angle=0.3, max_trans=0.2)
            pix = rng.uniform([50, 50], [590, 430], size=2)
            rho = rng.uniform(0.3, 2.0, size=())
            base, valid = warp(pix, rho, T, intr)
            if not valid:
                continue
            count += 1
            J = warp_jacobian(pix, rho, T, intr)
            J_fd = np.zeros((2, 6))
            for k in range(6):
                dxi = np.zeros(6)
                dxi[k] = h
                plus, _ = warp(pix, rho, Pose.exp(dxi) @ T, intr)
                minus, _ = warp(pix, rho, Pose.exp(-dxi) @ T, intr)
                J_fd[:, k] = (plus - minus) / (2 * h)
            scale = max(np.abs(J_fd).max(), 1.0)
            worst = max(worst, np.abs(J - J_fd).max() / scale)
        assert worst < 1e-4


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(-1.0, 525.0, 319.5, 239.5, 640, 480)
        with pytest.raises(ValueError):
            CameraIntrinsics(525.0, 525.0, 700.0, 239.5, 640, 480)

    def test_level_scaling_consistency(self, intr, rng):
        # Projecting a 3D point with level intrinsics must match mapping the
        # full-resolution projection through the level coordinate transform.
        from edgeodom.geometry import full_to_level

        pts = rng.uniform([-0.5, -0.5, 1.0], [0.5, 0.5, 3.0], size=(50, 3))
        p0, _ = project(pts, intr)
        for level in (1, 2):
            pl, _ = project(pts, intr.at_level(level))
            assert np.allclose(pl, full_to_level(p0, level), atol=1e-9)
