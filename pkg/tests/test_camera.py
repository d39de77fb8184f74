import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatnvs.camera import (
    CameraIntrinsics,
    CameraPose,
    interpolate_poses,
    pose_distance,
    project_point,
    quat_from_axis_angle,
    rotation_angle,
)
from splatnvs.enhancer import select_reference
from splatnvs.errors import InvalidInputError

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def random_pose(rng, t_scale=3.0):
    q = rng.normal(size=4)
    return CameraPose.normalized(q, rng.normal(scale=t_scale, size=3))


unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 0.1
).map(lambda v: np.asarray(v) / np.linalg.norm(v))
vec3 = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.asarray)
poses = st.builds(CameraPose.normalized, unit_quats, vec3)


class TestCameraPose:
    def test_rejects_non_unit_quaternion(self):
        with pytest.raises(InvalidInputError):
            CameraPose(np.array([1.0, 0.1, 0.0, 0.0]), np.zeros(3))

    def test_immutable(self):
        p = CameraPose.identity()
        with pytest.raises(ValueError):
            p.translation[0] = 1.0

    @given(poses)
    def test_compose_with_inverse_is_identity(self, p):
        e = p.compose(p.inverse())
        assert rotation_angle(e.rotation, IDENTITY_Q) < 1e-7 or abs(abs(e.rotation[0]) - 1) < 1e-9
        assert np.linalg.norm(e.translation) < 1e-9 * max(1.0, np.linalg.norm(p.translation))
        assert abs(np.linalg.norm(e.rotation) - 1) < 1e-9

    def test_center_roundtrip(self):
        p = random_pose(np.random.default_rng(1))
        np.testing.assert_allclose(p.transform(p.center), 0.0, atol=1e-12)


class TestIntrinsics:
    def test_valid(self):
        c = CameraIntrinsics(100, 90, 50, 40, 100, 80)
        assert c.fx == 100 and c.fy == 90

    @pytest.mark.parametrize(
        "args",
        [(0, 1, 5, 5, 10, 10), (1, -1, 5, 5, 10, 10), (1, 1, 0, 5, 10, 10), (1, 1, 5, 10, 10, 10), (1, 1, 5, 5, 0, 10)],
    )
    def test_invalid(self, args):
        with pytest.raises(InvalidInputError):
            CameraIntrinsics(*args)


class TestPoseDistance:
    def test_identity_case(self):
        p = random_pose(np.random.default_rng(0))
        assert pose_distance(p, p, 1, 10) == 0.0

    def test_pure_translation(self):
        a = CameraPose(IDENTITY_Q, [0, 0, 0])
        b = CameraPose(IDENTITY_Q, [3, 4, 0])
        assert pose_distance(a, b, 1, 10) == 5.0

    def test_half_turn_about_z(self):
        a = CameraPose(IDENTITY_Q, np.zeros(3))
        b = CameraPose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))
        assert pose_distance(a, b, 1, 10) == pytest.approx(10 * math.pi, abs=1e-12)
        assert pose_distance(a, b, 1, 10) == pytest.approx(31.41593, abs=1e-5)

    def test_non_unit_quaternion_rejected(self):
        class Raw:
            rotation = np.array([2.0, 0.0, 0.0, 0.0])
            translation = np.zeros(3)

        with pytest.raises(InvalidInputError):
            pose_distance(Raw(), CameraPose.identity())

    @given(poses, poses)
    def test_symmetric_nonnegative(self, a, b):
        d = pose_distance(a, b)
        assert d >= 0
        assert d == pytest.approx(pose_distance(b, a), abs=1e-12)

    @given(poses, poses)
    def test_sign_flip_invariant(self, a, b):
        flipped = CameraPose(-a.rotation, a.translation)
        assert pose_distance(flipped, b) == pose_distance(a, b)

    @settings(max_examples=50)
    @given(st.lists(poses, min_size=1, max_size=6), poses, st.floats(0.01, 100))
    def test_argmin_invariant_to_uniform_weight_scaling(self, sources, target, c):
        base = select_reference(sources, target, 1.0, 10.0)
        scaled = select_reference(sources, target, c * 1.0, c * 10.0)
        d = [pose_distance(s, target) for s in sources]
        # equal unless a near-tie makes the scaled float comparison flip
        assert scaled == base or abs(d[scaled] - d[base]) <= 1e-9 * max(1.0, d[base])


class TestInterpolation:
    def test_degenerate_path(self):
        p = random_pose(np.random.default_rng(2))
        out = interpolate_poses(p, p, 3)
        assert len(out) == 3
        for q in out:
            np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-12)
            np.testing.assert_allclose(q.translation, p.translation, atol=1e-12)

    def test_linear_translation(self):
        a = CameraPose(IDENTITY_Q, [0, 0, 0])
        b = CameraPose(IDENTITY_Q, [0, 0, 6])
        out = interpolate_poses(a, b, 2)
        np.testing.assert_allclose(out[0].translation, [0, 0, 2], atol=1e-12)
        np.testing.assert_allclose(out[1].translation, [0, 0, 4], atol=1e-12)

    def test_quarter_turn_midpoint_matches_log_exp_oracle(self):
        a = CameraPose(IDENTITY_Q, np.zeros(3))
        b = CameraPose(quat_from_axis_angle([0, 0, 1], math.pi / 2), np.zeros(3))
        (mid,) = interpolate_poses(a, b, 1)
        # oracle: exp(0.5 * log(Ra^T Rb)) on rotation matrices
        rel = Rotation.from_matrix(a.rotation_matrix.T @ b.rotation_matrix)
        half = Rotation.from_rotvec(0.5 * rel.as_rotvec())
        expected = a.rotation_matrix @ half.as_matrix()
        np.testing.assert_allclose(mid.rotation_matrix, expected, atol=1e-12)
        assert rotation_angle(mid.rotation, a.rotation) == pytest.approx(math.pi / 4, abs=1e-12)

    def test_shorter_arc_used(self):
        a = CameraPose(IDENTITY_Q, np.zeros(3))
        q = quat_from_axis_angle([1, 0, 0], 0.5)
        b = CameraPose(-q, np.zeros(3))  # same rotation, opposite hemisphere
        (mid,) = interpolate_poses(a, b, 1)
        assert rotation_angle(mid.rotation, a.rotation) == pytest.approx(0.25, abs=1e-12)

    def test_k_zero_rejected(self):
        with pytest.raises(InvalidInputError):
            interpolate_poses(CameraPose.identity(), CameraPose.identity(), 0)

    @given(poses, poses, st.integers(1, 8))
    def test_unit_and_monotone(self, a, b, K):
        out = interpolate_poses(a, b, K)
        assert len(out) == K
        angles = [rotation_angle(a.rotation, p.rotation) for p in out]
        for p in out:
            assert abs(np.linalg.norm(p.rotation) - 1) <= 1e-9
        assert all(x <= y + 1e-9 for x, y in zip(angles, angles[1:]))


class TestProjection:
    intr = CameraIntrinsics(100, 100, 50, 50, 100, 100)

    def test_optical_axis(self):
        u, v, d, ok = project_point([0, 0, 5], CameraPose.identity(), self.intr)
        assert (u, v, d, ok) == (50.0, 50.0, 5.0, True)

    def test_offset_point(self):
        u, v, d, _ = project_point([1, 0, 5], CameraPose.identity(), self.intr)
        assert (u, v, d) == (70.0, 50.0, 5.0)

    def test_behind_camera_flagged(self):
        res = project_point([0, 0, -1], CameraPose.identity(), self.intr)
        assert not res.in_front
        assert not project_point([0, 0, 0.005], CameraPose.identity(), self.intr).in_front

    def test_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(1000):
            pose = random_pose(rng)
            intr = CameraIntrinsics(*rng.uniform(50, 200, 2), 60.5, 40.25, 128, 96)
            x = rng.normal(scale=5, size=3)
            P = np.hstack([intr.K, np.zeros((3, 1))]) @ pose.matrix()
            h = P @ np.append(x, 1.0)
            res = project_point(x, pose, intr)
            if h[2] <= 0.01:
                assert not res.in_front
                continue
            checked += 1
            assert res.u == pytest.approx(h[0] / h[2], abs=1e-9 * max(1.0, abs(res.u)))
            assert res.v == pytest.approx(h[1] / h[2], abs=1e-9 * max(1.0, abs(res.v)))
            assert res.depth == pytest.approx(h[2], abs=1e-9)
        assert checked > 300
