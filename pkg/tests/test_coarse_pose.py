import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatloc.coarse_pose import (
    RansacConfig,
    _reproj_sq,
    localize_coarse,
    match,
    minimal_pnp,
    p3p,
    bearings,
    ransac_pnp,
    solve_pnp,
)
from splatloc.descriptors import KeypointSet
from splatloc.errors import (
    DimensionMismatchError,
    InsufficientDataError,
    InvalidInputError,
    RansacFailureError,
    SolverFailureError,
)
from splatloc.geometry import (
    CameraIntrinsics,
    Pose,
    random_quaternion,
    rotation_error_deg,
    translation_error,
)
from splatloc.renderer import Scene

K = CameraIntrinsics(500, 500, 319.5, 239.5, 640, 480)


def pnp_problem(rng, n):
    """Random pose and ``n`` world points visible in the image."""
    pose = Pose(random_quaternion(rng), rng.normal(size=3))
    cam = np.column_stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.0, 1.0, n), rng.uniform(2.5, 6.0, n)])
    world = (cam - pose.translation) @ pose.R  # R^T (cam - t)
    pixels = np.column_stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy])
    return pose, world, pixels


def scene_with_features(features):
    n = len(features)
    return Scene(np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), 0.1), np.ones(n),
                 np.zeros((n, 3)), features)


def keypoints(desc):
    desc = np.asarray(desc, dtype=float)
    return KeypointSet(np.arange(2 * len(desc)).reshape(-1, 2), desc, np.ones(len(desc)))


# -- matching -----------------------------------------------------------------

def test_match_exact_descriptor():
    feats = np.eye(10)
    res = match(keypoints([feats[7]]), scene_with_features(feats))
    assert res[0].point_index == 7
    assert res[0].similarity == pytest.approx(1.0)


def test_match_scale_invariant(rng):
    feats = rng.normal(size=(20, 6))
    q = rng.normal(size=(5, 6))
    a = match(keypoints(q), scene_with_features(feats))
    b = match(keypoints(3 * q), scene_with_features(feats * rng.uniform(0.1, 5, size=(20, 1))))
    np.testing.assert_array_equal(a.point_index, b.point_index)
    np.testing.assert_allclose(a.similarity, b.similarity, atol=1e-12)


def test_match_brute_force(rng):
    feats = rng.normal(size=(32, 8))
    q = rng.normal(size=(8, 8))
    res = match(keypoints(q), scene_with_features(feats))
    for i in range(8):
        sims = [q[i] @ f / np.linalg.norm(q[i]) / np.linalg.norm(f) for f in feats]
        assert res.point_index[i] == int(np.argmax(sims))
        assert res.similarity[i] == pytest.approx(max(sims), abs=1e-12)


def test_match_ties_and_zero_descriptors():
    feats = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    res = match(keypoints([[5.0, 0.0], [0.0, 0.0]]), scene_with_features(feats))
    assert len(res) == 1  # zero query skipped
    assert res[0].point_index == 1  # zero point skipped, tie goes to lower index


def test_match_mutual_filter():
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = [[1.0, 0.1], [1.0, 0.0], [0.0, 1.0]]
    res = match(keypoints(q), scene_with_features(feats), mutual=True)
    assert list(res.point_index) == [0, 1]
    np.testing.assert_array_equal(res.pixels[0], [2, 3])


def test_match_errors(rng):
    with pytest.raises(DimensionMismatchError):
        match(keypoints(rng.normal(size=(2, 3))), scene_with_features(rng.normal(size=(4, 5))))
    with pytest.raises(InvalidInputError):
        match(keypoints(rng.normal(size=(2, 3))), Scene.empty(3))


# -- PnP ---------------------------------------------------------------------------

def test_p3p_recovers_pose(rng):
    # raw minimal solutions lose a few digits near double roots of the quartic;
    # solve_pnp polishes them to full precision
    for _ in range(200):
        pose, world, pixels = pnp_problem(rng, 3)
        R, t, ok = p3p(bearings(pixels, K)[None], world[None])
        errs = [np.linalg.norm(R[0, k] - pose.R) + np.linalg.norm(t[0, k] - pose.translation)
                for k in np.flatnonzero(ok[0])]
        assert min(errs) < 1e-4


def test_minimal_pnp_batch(rng):
    probs = [pnp_problem(rng, 4) for _ in range(10)]
    R, t, ok = minimal_pnp(np.stack([p[2] for p in probs]), np.stack([p[1] for p in probs]), K)
    assert ok.all()
    for i, (pose, _, _) in enumerate(probs):
        np.testing.assert_allclose(R[i], pose.R, atol=1e-6)
        np.testing.assert_allclose(t[i], pose.translation, atol=1e-6)


def test_solve_pnp_six_points(rng):
    for _ in range(100):
        pose, world, pixels = pnp_problem(rng, 6)
        est = solve_pnp(pixels, world, K)
        assert translation_error(est, pose) < 1e-6
        assert rotation_error_deg(est, pose) < 1e-6
        rms = np.sqrt(np.mean(_reproj_sq(est.R, est.translation, world, pixels, K)))
        assert rms < 1e-8


def test_solve_pnp_coplanar_points(rng):
    pose, world, _ = pnp_problem(rng, 8)
    world[:, 2] = 0.0
    cam = pose.transform(world)
    if np.any(cam[:, 2] <= 0.5):
        pose = Pose(pose.rotation, pose.translation + [0, 0, 1 - cam[:, 2].min()])
        cam = pose.transform(world)
    pixels = np.column_stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy])
    est = solve_pnp(pixels, world, K)
    assert translation_error(est, pose) < 1e-6


def test_solve_pnp_single_pixel_is_degenerate(rng):
    _, world, _ = pnp_problem(rng, 6)
    with pytest.raises(SolverFailureError):
        solve_pnp(np.tile([100.0, 100.0], (6, 1)), world, K)


def test_solve_pnp_needs_four(rng):
    _, world, pixels = pnp_problem(rng, 3)
    with pytest.raises(InsufficientDataError):
        solve_pnp(pixels, world, K)


def test_solve_pnp_noisy_is_close(rng):
    pose, world, pixels = pnp_problem(rng, 50)
    est = solve_pnp(pixels + rng.normal(scale=0.5, size=pixels.shape), world, K)
    assert translation_error(est, pose) < 0.05
    assert rotation_error_deg(est, pose) < 0.5


# -- RANSAC ----------------------------------------------------------------------

def outlier_problem(seed, n_in=60, n_out=40):
    rng = np.random.default_rng(seed)
    pose, world, pixels = pnp_problem(rng, n_in + n_out)
    pixels[n_in:] = rng.uniform([0, 0], [640, 480], size=(n_out, 2))
    return pose, world, pixels


def test_ransac_all_inliers_matches_solve_pnp(rng):
    pose, world, pixels = pnp_problem(rng, 30)
    res = ransac_pnp(pixels, world, K, RansacConfig(iterations=200))
    assert res.inliers.all()
    direct = solve_pnp(pixels, world, K)
    assert translation_error(res.pose, direct) < 1e-9
    assert rotation_error_deg(res.pose, direct) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_ransac_with_outliers(seed):
    pose, world, pixels = outlier_problem(seed)
    res = ransac_pnp(pixels, world, K, RansacConfig(seed=seed))
    assert translation_error(res.pose, pose) < 1e-3
    assert rotation_error_deg(res.pose, pose) < 0.01
    assert res.inliers[:60].sum() >= 58
    assert res.inliers.sum() >= res.hypothesis_inliers


def test_ransac_is_deterministic():
    _, world, pixels = outlier_problem(3)
    pixels = pixels + np.random.default_rng(0).normal(scale=0.5, size=pixels.shape)
    a = ransac_pnp(pixels, world, K, RansacConfig(iterations=3000, seed=11))
    b = ransac_pnp(pixels, world, K, RansacConfig(iterations=3000, seed=11))
    np.testing.assert_array_equal(a.pose.as_array(), b.pose.as_array())
    np.testing.assert_array_equal(a.inliers, b.inliers)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 2.0))
def test_refit_never_loses_inliers(seed, noise):
    rng = np.random.default_rng(seed)
    pose, world, pixels = pnp_problem(rng, 40)
    pixels = pixels + rng.normal(scale=noise, size=pixels.shape)
    pixels[30:] = rng.uniform([0, 0], [640, 480], size=(10, 2))
    res = ransac_pnp(pixels, world, K, RansacConfig(iterations=500, seed=seed))
    assert res.inliers.sum() >= res.hypothesis_inliers


def test_ransac_failure_has_diagnostics(rng):
    world = rng.normal(size=(12, 3)) + [0, 0, 5]
    pixels = rng.uniform([0, 0], [640, 480], size=(12, 2))
    with pytest.raises(RansacFailureError) as info:
        ransac_pnp(pixels, world, K, RansacConfig(iterations=50, threshold=1e-6))
    assert info.value.diagnostics["iterations"] == 50


def test_ransac_config_validation():
    with pytest.raises(InvalidInputError):
        RansacConfig(iterations=0)
    with pytest.raises(InvalidInputError):
        RansacConfig(threshold=0.0)
    with pytest.raises(InvalidInputError):
        RansacConfig(sample_size=3)


# -- end to end ---------------------------------------------------------------------

def test_localize_coarse_dimension_mismatch(trained_world):
    world, _, scene, _ = trained_world
    other = world.provider()
    other.scene = scene.replace(features=np.zeros((len(scene), 8)))
    with pytest.raises(DimensionMismatchError):
        localize_coarse(np.zeros((60, 80, 3)), scene, world.intrinsics, other)


@pytest.mark.slow
def test_localize_coarse_zero_noise(trained_world):
    world, _, scene, _ = trained_world
    provider = world.provider(noise=0.0)
    for pose in world.sample_poses(5, seed=77):
        img = provider.render_image(pose)
        est = localize_coarse(img, scene, world.intrinsics, provider).pose
        assert translation_error(est, pose) < 1e-2
        assert rotation_error_deg(est, pose) < 0.1
