import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatloc.errors import BehindCameraError, InvalidDepthError, InvalidInputError
from splatloc.geometry import (
    CameraIntrinsics,
    Pose,
    Quaternion,
    backproject,
    compose,
    inverse,
    look_at,
    normalize,
    perturb_pose,
    project,
    quat_from_rotvec,
    quat_to_rotmat,
    random_quaternion,
    rotation_angle,
    rotation_error_deg,
    rotmat_derivatives,
    rotmat_to_quat,
    translation_error,
)

K100 = CameraIntrinsics(100, 100, 50, 50, 101, 101)

finite = st.floats(-10, 10, allow_nan=False)
quats = st.lists(finite, min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3)


def random_pose(rng):
    return Pose(random_quaternion(rng), rng.normal(size=3))


def test_identity_quaternion():
    np.testing.assert_array_equal(quat_to_rotmat(Quaternion(1, 0, 0, 0)), np.eye(3))


def test_half_turn_about_z():
    np.testing.assert_allclose(quat_to_rotmat(Quaternion(0, 0, 0, 1)), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidInputError):
        quat_to_rotmat(Quaternion(0, 0, 0, 0))
    with pytest.raises(InvalidInputError):
        normalize([0, 0, 0, 0])


@given(quats)
def test_rotmat_is_a_rotation(q):
    M = quat_to_rotmat(q)
    np.testing.assert_allclose(M.T @ M, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(M) - 1.0) < 1e-9


@given(quats, st.floats(1e-3, 1e3))
def test_rotmat_scale_invariant(q, s):
    np.testing.assert_allclose(quat_to_rotmat(normalize(q)), quat_to_rotmat(np.asarray(q) * s), atol=1e-9)


@given(quats)
def test_antipodal_quaternions_agree(q):
    np.testing.assert_allclose(quat_to_rotmat(q), quat_to_rotmat(-np.asarray(q)), atol=1e-12)


@given(quats)
def test_normalize_gives_unit_norm(q):
    assert abs(normalize(q).norm() - 1.0) < 1e-9


def test_rotmat_quat_round_trip(rng):
    for _ in range(200):
        q = random_quaternion(rng)
        back = rotmat_to_quat(quat_to_rotmat(q))
        np.testing.assert_allclose(back.as_array(), q.as_array(), atol=1e-12)


def test_rotmat_derivatives_match_finite_differences(rng):
    q = normalize(rng.normal(size=4)).as_array()
    h = 1e-6
    D = rotmat_derivatives(q)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        # homogeneous form of the rotation formula, equal to it on unit quaternions
        fd = (_raw_rotmat(q + e) - _raw_rotmat(q - e)) / (2 * h)
        np.testing.assert_allclose(D[k], fd, atol=1e-7)


def _raw_rotmat(q):
    w, x, y, z = q
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def test_quat_from_rotvec_angle(rng):
    for _ in range(20):
        v = rng.normal(size=3)
        v *= rng.uniform(0, np.pi) / np.linalg.norm(v)
        assert rotation_angle(quat_to_rotmat(quat_from_rotvec(v))) == pytest.approx(np.linalg.norm(v), abs=1e-9)


def test_project_optical_axis():
    pix, z = project([0, 0, 1], Pose.identity(), K100)
    np.testing.assert_allclose(pix, [50, 50])
    assert z == 1


def test_project_offset_point():
    pix, z = project([0.1, 0, 1], Pose.identity(), K100)
    np.testing.assert_allclose(pix, [60, 50])
    assert z == 1


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project([0, 0, -1], Pose.identity(), K100)
    with pytest.raises(BehindCameraError):
        project([0, 0, 1e-7], Pose.identity(), K100)


def test_backproject_examples():
    np.testing.assert_allclose(backproject([50, 50], 2, K100), [0, 0, 2])
    np.testing.assert_allclose(backproject([60, 50], 1, K100), [0.1, 0, 1])


@pytest.mark.parametrize("depth", [0.0, -1.0])
def test_backproject_rejects_bad_depth(depth):
    with pytest.raises(InvalidDepthError):
        backproject([10, 10], depth, K100)


@settings(max_examples=200)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(1e-3, 1e3))
def test_project_backproject_round_trip(u, v, d):
    p = backproject([u, v], d, K100)
    pix, z = project(p, Pose.identity(), K100)
    np.testing.assert_allclose(pix, [u, v], atol=1e-9)
    assert abs(z - d) < 1e-9 * max(1.0, d)


def test_compose_with_identity(rng):
    P = random_pose(rng)
    Q = compose(P, Pose.identity())
    np.testing.assert_allclose(Q.as_array(), P.as_array(), atol=1e-12)


def test_inverse_of_identity():
    I = inverse(Pose.identity())
    np.testing.assert_allclose(I.R, np.eye(3))
    np.testing.assert_allclose(I.translation, 0)


def test_compose_inverse_is_identity(rng):
    for _ in range(50):
        P = random_pose(rng)
        E = compose(P, inverse(P))
        assert rotation_angle(E.R) < 1e-9
        assert np.linalg.norm(E.translation) < 1e-9
        x = rng.normal(size=3)
        np.testing.assert_allclose(compose(inverse(P), P).transform(x), x, atol=1e-9)


def test_compose_applies_right_operand_first(rng):
    a, b = random_pose(rng), random_pose(rng)
    x = rng.normal(size=3)
    np.testing.assert_allclose(compose(a, b).transform(x), a.transform(b.transform(x)), atol=1e-12)


def test_compose_associative(rng):
    for _ in range(20):
        a, b, c = (random_pose(rng) for _ in range(3))
        l = compose(compose(a, b), c)
        r = compose(a, compose(b, c))
        np.testing.assert_allclose(l.matrix(), r.matrix(), atol=1e-9)


def test_pose_is_immutable():
    P = Pose(Quaternion(), [1, 2, 3])
    with pytest.raises(ValueError):
        P.translation[0] = 5


def test_intrinsics_validation():
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(1, 1, 4, 1, 4, 4)
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(1, 1, 1, 1, 0, 4)


def test_error_metrics(rng):
    P = random_pose(rng)
    assert rotation_error_deg(P, P) < 1e-6
    assert translation_error(P, P) < 1e-12
    Q = perturb_pose(P, 3.0, 0.25, rng)
    assert rotation_error_deg(P, Q) == pytest.approx(3.0, abs=1e-9)
    assert translation_error(P, Q) == pytest.approx(0.25, abs=1e-12)


def test_look_at_puts_target_on_axis():
    P = look_at([3, 1, 2], [0, 0.5, 0])
    cam = P.transform([0, 0.5, 0])
    np.testing.assert_allclose(cam[:2], 0, atol=1e-12)
    assert cam[2] > 0
    np.testing.assert_allclose(P.camera_center(), [3, 1, 2], atol=1e-12)
    # world up appears as image up (negative camera y)
    assert P.R[1] @ np.array([0, 0, 1.0]) < 0
