import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import near_identity_pose, random_scene, small_camera
from splatloc.coarse_pose import localize_coarse
from splatloc.errors import DivergenceError, InvalidInputError, NoOverlapError
from splatloc.geometry import (
    CameraIntrinsics,
    Pose,
    compose,
    perturb_pose,
    random_quaternion,
    rotation_error_deg,
    translation_error,
)
from splatloc.harness.synthetic import generate_world
from splatloc.refinement import (
    LocalizeConfig,
    RefineConfig,
    WarpProblem,
    bilinear_sample,
    bilinear_sample_many,
    localize,
    refine_feature,
    refine_warp,
    subpixel_match,
    warp,
    warp_loss,
    warp_points,
)
from splatloc.renderer import DEPTH_SENTINEL, Scene, render


# -- bilinear sampling -------------------------------------------------------------

def test_bilinear_integer_pixel_is_exact(rng):
    img = rng.uniform(size=(5, 6, 3))
    for u, v in [(0, 0), (5, 4), (2, 3)]:
        np.testing.assert_array_equal(bilinear_sample(img, (u, v)), img[v, u])


def test_bilinear_midpoint(rng):
    img = rng.uniform(size=(4, 4, 3))
    np.testing.assert_allclose(bilinear_sample(img, (1.5, 2)), (img[2, 1] + img[2, 2]) / 2, atol=1e-15)


def test_bilinear_out_of_bounds_is_invalid(rng):
    img = rng.uniform(size=(4, 5, 3))
    assert bilinear_sample(img, (-0.01, 1)) is None
    assert bilinear_sample(img, (4.001, 1)) is None
    assert bilinear_sample(img, (4.0, 3.0)) is not None


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bilinear_matches_formula(seed):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(2, 12, size=2)
    img = rng.normal(size=(H, W, 2))
    u, v = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
    i, j = min(int(u), W - 2), min(int(v), H - 2)
    a, b = u - i, v - j
    top = img[j, i] + a * (img[j, i + 1] - img[j, i])
    bottom = img[j + 1, i] + a * (img[j + 1, i + 1] - img[j + 1, i])
    np.testing.assert_allclose(bilinear_sample(img, (u, v)), top + b * (bottom - top), atol=1e-9)


def test_bilinear_derivatives_off_grid(rng):
    img = rng.normal(size=(6, 7, 3))
    pix = np.array([[2.3, 3.6], [0.2, 4.9], [5.7, 0.1]])
    _, du, dv, _ = bilinear_sample_many(img, pix)
    h = 1e-6
    fd_u = (bilinear_sample_many(img, pix + [h, 0])[0] - bilinear_sample_many(img, pix - [h, 0])[0]) / (2 * h)
    fd_v = (bilinear_sample_many(img, pix + [0, h])[0] - bilinear_sample_many(img, pix - [0, h])[0]) / (2 * h)
    np.testing.assert_allclose(du, fd_u, atol=1e-8)
    np.testing.assert_allclose(dv, fd_v, atol=1e-8)


# -- warp ---------------------------------------------------------------------------

K32 = CameraIntrinsics(40, 40, 15.5, 15.5, 32, 32)


def test_identity_warp(rng):
    pose = Pose(random_quaternion(rng), rng.normal(size=3))
    pix = rng.uniform(0, 31, size=(200, 2))
    depth = rng.uniform(0.5, 5, size=200)
    warped, ok = warp_points(pix, depth, pose, pose, K32)
    assert ok.all()
    np.testing.assert_allclose(warped, pix, atol=1e-9)
    s = warp(pix[0], pose, pose, depth[0], K32)
    assert s.valid
    np.testing.assert_allclose(s.warped, pix[0], atol=1e-9)


@pytest.mark.parametrize("delta,z", [(0.1, 2.0), (-0.05, 4.0), (0.3, 1.5)])
def test_translation_shifts_horizontally(delta, z):
    opt = Pose(Pose.identity().rotation, [delta, 0.0, 0.0])
    s = warp((K32.cx, K32.cy), Pose.identity(), opt, z, K32)
    # the camera moved by -delta along x in the world, so the point moves by +delta in the camera
    # frame; with t = +delta the camera-frame x is delta and the pixel shifts by fx * delta / z
    np.testing.assert_allclose(s.warped, [K32.cx + K32.fx * delta / z, K32.cy], atol=1e-12)


def test_camera_translation_shifts_left():
    # moving the camera centre by +delta along x shifts an on-axis point by -fx * delta / z
    delta, z = 0.2, 2.5
    opt = Pose.from_rt(np.eye(3), -np.array([delta, 0.0, 0.0]))
    s = warp((K32.cx, K32.cy), Pose.identity(), opt, z, K32)
    np.testing.assert_allclose(s.warped, [K32.cx - K32.fx * delta / z, K32.cy], atol=1e-12)


def test_sentinel_depth_is_invalid():
    assert not warp((3, 4), Pose.identity(), Pose.identity(), DEPTH_SENTINEL, K32).valid
    depth = np.full((32, 32), DEPTH_SENTINEL)
    assert not warp((3, 4), Pose.identity(), Pose.identity(), depth, K32).valid
    _, ok = warp_points([[3, 4]], [DEPTH_SENTINEL], Pose.identity(), Pose.identity(), K32)
    assert not ok[0]


def test_behind_camera_is_invalid():
    opt = Pose.from_rt(np.eye(3), [0.0, 0.0, -3.0])
    assert not warp((10, 10), Pose.identity(), opt, 2.0, K32).valid


# -- warp loss ---------------------------------------------------------------------

def rendered_pair(rng, size=24, n=30):
    K = small_camera(size)
    scene = random_scene(rng, n=n, dim=3, spread=0.8, scale=(0.1, 0.4), opacity=(0.5, 0.95))
    render_pose = near_identity_pose(rng, 0.02, 0.02)
    out = render(scene, render_pose, K, {"rgb", "depth"})
    return scene, K, render_pose, out


def test_warp_loss_zero_at_render_pose(rng):
    _, K, pose, out = rendered_pair(rng)
    assert warp_loss(out.rgb, out.rgb, out.depth, pose, pose, K) < 1e-9


def test_warp_loss_all_sentinel(rng):
    K = small_camera(8)
    img = rng.uniform(size=(8, 8, 3))
    with pytest.raises(NoOverlapError):
        warp_loss(img, img, np.full((8, 8), DEPTH_SENTINEL), Pose.identity(), Pose.identity(), K)


def test_warp_loss_no_overlap_after_warp(rng):
    _, K, pose, out = rendered_pair(rng)
    far = Pose.from_rt(np.eye(3), [50.0, 0.0, 0.0])
    with pytest.raises(NoOverlapError):
        warp_loss(out.rgb, out.rgb, out.depth, pose, far, K)


def brute_force_warp_loss(q, q_r, z_r, render_pose, opt_pose, K):
    total, n = 0.0, 0
    for v in range(K.height):
        for u in range(K.width):
            s = warp((u, v), render_pose, opt_pose, z_r, K)
            if not s.valid:
                continue
            val = bilinear_sample(q, s.warped)
            if val is None:
                continue
            total += np.linalg.norm(val - q_r[v, u])
            n += 1
    return total / n


@pytest.mark.parametrize("seed", range(3))
def test_warp_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    scene, K, render_pose, out = rendered_pair(rng, size=16)
    query = render(scene, near_identity_pose(rng, 0.03, 0.03), K, {"rgb"}).rgb
    opt = near_identity_pose(rng, 0.03, 0.03)
    fast = warp_loss(query, out.rgb, out.depth, render_pose, opt, K)
    assert fast == pytest.approx(brute_force_warp_loss(query, out.rgb, out.depth, render_pose, opt, K), abs=1e-12)


def test_warp_loss_rigid_reparameterization(rng):
    scene, K, render_pose, out = rendered_pair(rng)
    query = render(scene, near_identity_pose(rng, 0.03, 0.03), K, {"rgb"}).rgb
    opt = near_identity_pose(rng, 0.03, 0.03)
    G = Pose(random_quaternion(rng), rng.normal(size=3))
    a = warp_loss(query, out.rgb, out.depth, render_pose, opt, K)
    b = warp_loss(query, out.rgb, out.depth, compose(render_pose, G), compose(opt, G), K)
    assert abs(a - b) < 1e-9


def warp_gradient_error(seed, h=1e-5):
    """Relative error of the analytic warp-loss gradient against central differences.

    Samples whose warped location lies within 0.01 px of a bilinear grid line
    or within 1 px of the border are excluded so that no stencil crosses a
    cell boundary. Returns ``(relative error, number of samples)``.
    """
    rng = np.random.default_rng(seed)
    scene, K, render_pose, out = rendered_pair(rng)
    query = render(scene, near_identity_pose(rng, 0.03, 0.03), K, {"rgb"}).rgb
    problem = WarpProblem(query, out.rgb, out.depth, render_pose, K)
    params = near_identity_pose(rng, 0.03, 0.03).as_array()
    params[:4] *= rng.uniform(0.8, 1.2)  # off the unit sphere as well
    mask = problem.valid_mask(params, grid_margin=0.01, border=1.0)
    _, grad, n = problem.loss_and_grad(params, mask)
    fd = np.zeros(7)
    for i in range(7):
        e = np.zeros(7)
        e[i] = h
        fd[i] = (problem.loss(params + e, mask)[0] - problem.loss(params - e, mask)[0]) / (2 * h)
    return np.linalg.norm(grad - fd) / np.linalg.norm(fd), n


@pytest.mark.parametrize("seed", range(20))
def test_warp_gradient_matches_finite_differences(seed):
    err, n = warp_gradient_error(seed)
    assert n >= 100
    assert err < 1e-3


def test_warp_problem_shape_checks(rng):
    _, K, pose, out = rendered_pair(rng)
    with pytest.raises(Exception):
        WarpProblem(out.rgb[:-1], out.rgb, out.depth, pose, K)


# -- refine_warp ---------------------------------------------------------------------

def test_refine_config_validation():
    with pytest.raises(InvalidInputError):
        RefineConfig(lr=0.0)
    with pytest.raises(InvalidInputError):
        RefineConfig(iterations=-1)


def test_refine_from_ground_truth_stays_put(rng):
    scene, K, pose, out = rendered_pair(rng)
    res = refine_warp(out.rgb, scene, pose, K, RefineConfig(iterations=50))
    assert res.losses[0] < 1e-9
    assert res.best_iteration == 0
    np.testing.assert_array_equal(res.pose.as_array(), pose.as_array())


def test_refine_returns_best_iterate(rng):
    scene, K, pose, _ = rendered_pair(rng)
    query = render(scene, near_identity_pose(rng, 0.03, 0.03), K, {"rgb"}).rgb
    res = refine_warp(query, scene, pose, K, RefineConfig(iterations=60, lr=5e-3), keep_poses=True)
    assert len(res.losses) == 61 and len(res.poses) == 61
    assert res.losses[res.best_iteration] == min(res.losses)
    np.testing.assert_array_equal(res.pose.as_array(), res.poses[res.best_iteration].as_array())


def test_refine_zero_iterations(rng):
    scene, K, pose, _ = rendered_pair(rng)
    query = render(scene, near_identity_pose(rng, 0.03, 0.03), K, {"rgb"}).rgb
    res = refine_warp(query, scene, pose, K, RefineConfig(iterations=0))
    assert len(res.losses) == 1
    np.testing.assert_array_equal(res.pose.as_array(), pose.as_array())


def test_refine_divergence_guard(rng):
    # start close to the query so that large steps overshoot far past it
    scene, K, pose, _ = rendered_pair(rng)
    query = render(scene, compose(near_identity_pose(rng, 0.002, 0.002), pose), K, {"rgb"}).rgb
    with pytest.raises(DivergenceError) as info:
        refine_warp(query, scene, pose, K, RefineConfig(iterations=50, lr=0.05))
    diag = info.value.diagnostics
    assert diag["loss"] > 10 * diag["initial_loss"]
    assert diag["result"].losses[diag["result"].best_iteration] == min(diag["result"].losses)


def test_refine_without_overlap(rng):
    K = small_camera(8)
    with pytest.raises(NoOverlapError):
        refine_warp(np.zeros((8, 8, 3)), Scene.empty(3), Pose.identity(), K)


def test_refine_is_deterministic(rng):
    scene, K, pose, _ = rendered_pair(rng)
    query = render(scene, near_identity_pose(rng, 0.03, 0.03), K, {"rgb"}).rgb
    a = refine_warp(query, scene, pose, K, RefineConfig(iterations=40))
    b = refine_warp(query, scene, pose, K, RefineConfig(iterations=40))
    assert a.losses == b.losses
    np.testing.assert_array_equal(a.pose.as_array(), b.pose.as_array())


def test_loss_trace_csv(tmp_path, rng):
    scene, K, pose, _ = rendered_pair(rng)
    query = render(scene, near_identity_pose(rng, 0.03, 0.03), K, {"rgb"}).rgb
    res = refine_warp(query, scene, pose, K, RefineConfig(iterations=5))
    res.to_csv(tmp_path / "trace.csv")
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss,n_valid" and len(rows) == 7
    assert float(rows[1].split(",")[1]) == res.losses[0]


@pytest.fixture(scope="module")
def desk_world():
    return generate_world(0, 500, 1, 16)


def perturbation_recovery(world, seed, rot=2.0, frac=0.05):
    """Remaining error / perturbation after refine_warp from a perturbed pose (ground-truth scene)."""
    rng = np.random.default_rng(seed)
    gt = world.sample_poses(1, seed=seed)[0]
    query = render(world.scene, gt, world.intrinsics, {"rgb"}).rgb
    trans = frac * world.diameter
    start = perturb_pose(gt, rot, trans, rng)
    res = refine_warp(query, world.scene, start, world.intrinsics, RefineConfig())
    return rotation_error_deg(res.pose, gt) / rot, translation_error(res.pose, gt) / trans


@pytest.mark.parametrize("seed", range(3))
def test_perturbation_recovery(desk_world, seed):
    r_rot, r_trans = perturbation_recovery(desk_world, seed)
    assert r_rot < 0.1 and r_trans < 0.1


# -- refine_feature ------------------------------------------------------------------

def test_subpixel_match_keeps_exact_pixel(rng):
    feats = rng.normal(size=(6, 6, 4))
    valid = np.ones((6, 6), dtype=bool)
    q = feats[3, 2] / np.linalg.norm(feats[3, 2])
    np.testing.assert_array_equal(subpixel_match(q[None], feats, valid, np.array([[2.0, 3.0]])), [[2.0, 3.0]])


def test_subpixel_match_finds_interpolated_descriptor(rng):
    feats = rng.normal(size=(6, 6, 4))
    valid = np.ones((6, 6), dtype=bool)
    target = bilinear_sample(feats, (2.25, 3.5))
    best = subpixel_match((target / np.linalg.norm(target))[None], feats, valid, np.array([[2.0, 3.0]]))
    np.testing.assert_allclose(best, [[2.25, 3.5]])


def test_subpixel_match_avoids_invalid_support(rng):
    feats = rng.normal(size=(6, 6, 4))
    valid = np.ones((6, 6), dtype=bool)
    valid[:, 3:] = False
    target = bilinear_sample(feats, (2.5, 3.0))
    best = subpixel_match((target / np.linalg.norm(target))[None], feats, valid, np.array([[2.0, 3.0]]))
    assert best[0, 0] <= 2.0


def test_feature_refinement_fixed_point(desk_world):
    provider = desk_world.provider(noise=0.0)
    gt = desk_world.sample_poses(1, seed=5)[0]
    img = provider.render_image(gt)
    res = refine_feature(img, desk_world.scene, gt, desk_world.intrinsics, provider, rounds=2)
    assert res.warning is None
    assert translation_error(res.pose, gt) < 1e-4
    assert rotation_error_deg(res.pose, gt) < 1e-3


# below these errors the rounds are limited by rendered-map resolution
FEATURE_FLOOR_DEG = 0.05
FEATURE_FLOOR_M = 5e-4


@pytest.mark.parametrize("seed", range(3))
def test_feature_refinement_decreases_error(desk_world, seed):
    provider = desk_world.provider(noise=0.0)
    rng = np.random.default_rng(seed)
    gt = desk_world.sample_poses(1, seed=100 + seed)[0]
    img = provider.render_image(gt)
    start = perturb_pose(gt, 2.0, 0.05 * desk_world.diameter, rng)
    res = refine_feature(img, desk_world.scene, start, desk_world.intrinsics, provider, rounds=5)
    assert res.warning is None and len(res.poses) == 6
    rot = [rotation_error_deg(p, gt) for p in res.poses]
    trans = [translation_error(p, gt) for p in res.poses]
    for errs, floor in [(rot, FEATURE_FLOOR_DEG), (trans, FEATURE_FLOOR_M)]:
        for prev, cur in zip(errs, errs[1:]):
            if prev > floor:
                assert cur < prev
        assert errs[-1] < floor


def test_feature_refinement_rejects_zero_rounds(desk_world):
    provider = desk_world.provider(noise=0.0)
    img = provider.render_image(desk_world.poses[0])
    with pytest.raises(InvalidInputError):
        refine_feature(img, desk_world.scene, desk_world.poses[0], desk_world.intrinsics, provider, rounds=0)


def test_feature_refinement_without_overlap_warns(desk_world):
    provider = desk_world.provider(noise=0.0)
    gt = desk_world.poses[0]
    img = provider.render_image(gt)
    away = Pose.from_rt(gt.R, gt.translation + [0.0, 0.0, -50.0])  # scene behind the camera
    res = refine_feature(img, desk_world.scene, away, desk_world.intrinsics, provider, rounds=3)
    assert res.warning is not None
    assert res.pose is away


# -- localize ------------------------------------------------------------------------

def test_localize_unknown_variant(desk_world):
    provider = desk_world.provider(noise=0.0)
    img = provider.render_image(desk_world.poses[0])
    with pytest.raises(InvalidInputError):
        localize(img, desk_world.scene, desk_world.intrinsics, provider, variant="extra")


def test_localize_coarse_variant_is_localize_coarse(trained_world):
    world, provider, scene, _ = trained_world
    img = provider.render_image(world.sample_poses(1, seed=3)[0])
    a = localize(img, scene, world.intrinsics, provider, variant="coarse")
    b = localize_coarse(img, scene, world.intrinsics, provider)
    np.testing.assert_array_equal(a.pose.as_array(), b.pose.as_array())


def test_localize_fine_runs_feature_stage_first(trained_world):
    world, provider, scene, _ = trained_world
    img = provider.render_image(world.sample_poses(1, seed=4)[0])
    res = localize(img, scene, world.intrinsics, provider, variant="fine")
    assert res.feature is not None and res.warp is not None
    np.testing.assert_array_equal(res.feature.pose.as_array(), res.feature_pose.as_array())
    # the warp stage starts from the feature-refined pose
    assert res.warp.best_iteration > 0 or res.pose == res.feature_pose


def test_localize_divergence_fallback(trained_world):
    world, provider, scene, _ = trained_world
    gt = world.sample_poses(1, seed=6)[0]
    img = provider.render_image(gt)
    coarse = localize_coarse(img, scene, world.intrinsics, provider).pose
    cfg = LocalizeConfig(refine=RefineConfig(lr=0.02, divergence_factor=1.01))
    res = localize(img, scene, world.intrinsics, provider, cfg, "base", coarse=coarse)
    assert "warp_diverged" in res.diagnostics
    assert res.warp.losses[res.warp.best_iteration] == min(res.warp.losses)
    cfg.divergence_fallback = False
    with pytest.raises(DivergenceError):
        localize(img, scene, world.intrinsics, provider, cfg, "base", coarse=coarse)


@pytest.mark.slow
def test_base_not_worse_than_coarse(trained_world):
    world, provider, scene, _ = trained_world
    cfg = LocalizeConfig()
    better = 0
    poses = world.sample_poses(50, seed=2024)
    for gt in poses:
        img = provider.render_image(gt)
        coarse = localize(img, scene, world.intrinsics, provider, cfg, "coarse")
        base = localize(img, scene, world.intrinsics, provider, cfg, "base", coarse=coarse.pose)
        better += (translation_error(base.pose, gt) <= translation_error(coarse.pose, gt)
                   and rotation_error_deg(base.pose, gt) <= rotation_error_deg(coarse.pose, gt))
    assert better >= 45
