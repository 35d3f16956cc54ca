"""Test-time pose refinement.

Two refiners are provided:

* :func:`refine_warp` renders color and depth once at the starting pose,
  then runs Adam on the query pose so that query colors sampled at warped
  pixel locations agree with the reference render;
* :func:`refine_feature` repeatedly renders a descriptor map at the current
  pose, matches query keypoints against it, lifts the matched pixels to 3D
  with the rendered depth and re-solves PnP.

Pose parameters are ``(qw, qx, qy, qz, tx, ty, tz)``; the rotation used in
the loss is that of the normalized quaternion.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .coarse_pose import (
    RansacConfig,
    _reproj_sq,
    _trimmed_inliers,
    localize_coarse,
    ransac_pnp,
    solve_pnp,
)
from .descriptors import DEFAULT_NUM_KEYPOINTS, DescriptorProvider
from .errors import (
    DimensionMismatchError,
    DivergenceError,
    InsufficientDataError,
    InvalidInputError,
    NoOverlapError,
    RansacFailureError,
    SolverFailureError,
)
from .geometry import (
    DEFAULT_DEPTH_EPS,
    CameraIntrinsics,
    Pose,
    backproject,
    backproject_pixels,
    inverse,
    project_points,
    quats_to_rotmats,
    rotmat_derivatives,
)
from .optim import Adam
from .renderer import DEPTH_SENTINEL, Scene, render

log = logging.getLogger(__name__)

INDOOR_ITERATIONS = 250
OUTDOOR_ITERATIONS = 350
# the warp loss is a mean of norms, so a loss at round-off level is already the global minimum
LOSS_FLOOR = 1e-12


@dataclass
class RefineConfig:
    lr: float = 1e-3
    iterations: int = INDOOR_ITERATIONS
    feature_rounds: int = 5
    tol: float = 0.0  # stop once the loss changes by less than this; 0 disables
    divergence_factor: float = 10.0
    sample_stride: int | None = None  # None: 1 up to 640x480, else 2
    max_samples: int | None = None  # seeded random subset of the samples
    seed: int = 0
    feature_keypoints: int = DEFAULT_NUM_KEYPOINTS
    feature_mutual: bool = True  # keep only mutual nearest query/rendered-pixel pairs
    feature_subpixel: bool = True  # refine matched rendered pixels below the pixel grid
    feature_ransac: RansacConfig = field(
        default_factory=lambda: RansacConfig(iterations=2000, threshold=2.0)
    )

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidInputError("learning rate must be positive")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be non-negative")
        if self.feature_rounds < 0:
            raise InvalidInputError("feature_rounds must be non-negative")


@dataclass
class WarpSample:
    source: np.ndarray
    warped: np.ndarray | None
    valid: bool


# -- sampling -------------------------------------------------------------------

def bilinear_sample_many(image: np.ndarray, pixels: np.ndarray):
    """Bilinear lookup at continuous ``(u, v)`` pixel coordinates.

    Returns ``(values (n, C), d_du (n, C), d_dv (n, C), valid (n,))``.
    Samples outside ``[0, W-1] x [0, H-1]`` are invalid and return zeros.
    """
    img = image if image.ndim == 3 else image[..., None]
    H, W, C = img.shape
    u, v = pixels[:, 0], pixels[:, 1]
    valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    u0 = np.minimum(np.floor(uu).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(vv).astype(np.int64), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = (uu - u0)[:, None]
    b = (vv - v0)[:, None]
    I00, I01 = img[v0, u0], img[v0, u1]
    I10, I11 = img[v1, u0], img[v1, u1]
    val = (1 - a) * (1 - b) * I00 + a * (1 - b) * I01 + (1 - a) * b * I10 + a * b * I11
    d_du = (1 - b) * (I01 - I00) + b * (I11 - I10)
    d_dv = (1 - a) * (I10 - I00) + a * (I11 - I01)
    mask = valid[:, None]
    return np.where(mask, val, 0.0), np.where(mask, d_du, 0.0), np.where(mask, d_dv, 0.0), valid


def bilinear_sample(image: np.ndarray, pixel) -> np.ndarray | None:
    """Color at a continuous pixel location, or ``None`` when out of bounds."""
    val, _, _, ok = bilinear_sample_many(np.asarray(image, dtype=float),
                                         np.asarray(pixel, dtype=float).reshape(1, 2))
    return val[0] if ok[0] else None


# -- warp ---------------------------------------------------------------------------

def warp_points(pixels, depths, render_pose: Pose, opt_pose: Pose, K: CameraIntrinsics,
                eps: float = DEFAULT_DEPTH_EPS):
    """Vectorized warp of reference pixels with known depth into the query view.

    Returns ``(warped_pixels, valid)``; a sample is valid when its depth is
    positive and non-sentinel and the point lies in front of the query camera.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    depths = np.asarray(depths, dtype=float).reshape(-1)
    ok = (depths > 0) & (depths != DEPTH_SENTINEL) & np.isfinite(depths)
    cam_r = backproject_pixels(pixels, np.where(ok, depths, 1.0), K)
    world = (cam_r - render_pose.translation) @ render_pose.R
    cam_q = opt_pose.transform(world)
    warped, z = project_points(cam_q, K)
    ok &= z > eps
    return warped, ok


def warp(p_i, render_pose: Pose, opt_pose: Pose, z_r, K: CameraIntrinsics,
         eps: float = DEFAULT_DEPTH_EPS) -> WarpSample:
    """Warp one reference pixel into the query view.

    ``z_r`` is either the rendered depth map (looked up at the rounded pixel)
    or the depth of this pixel.
    """
    p = np.asarray(p_i, dtype=float).reshape(2)
    z_arr = np.asarray(z_r, dtype=float)
    if z_arr.ndim >= 2:
        u, v = int(round(p[0])), int(round(p[1]))
        if not (0 <= v < z_arr.shape[0] and 0 <= u < z_arr.shape[1]):
            return WarpSample(p, None, False)
        z = float(z_arr[v, u])
    else:
        z = float(z_arr)
    if not z > 0 or z == DEPTH_SENTINEL:
        return WarpSample(p, None, False)
    world = inverse(render_pose).transform(backproject(p, z, K))
    cam = opt_pose.transform(world)
    if not cam[2] > eps:
        return WarpSample(p, None, False)
    warped, _ = project_points(cam, K)
    return WarpSample(p, warped, True)


class WarpProblem:
    """Warp loss of a fixed reference render as a function of the query pose.

    The loss is the mean over valid samples of the Euclidean norm of the
    color difference between the query (sampled at the warped location) and
    the reference render. Samples are valid when the reference depth is
    valid, the point is in front of the query camera and the warped location
    falls inside the image. The validity mask is treated as constant when
    differentiating.
    """

    def __init__(self, query, reference, depth, render_pose: Pose, K: CameraIntrinsics,
                 stride: int | None = None, max_samples: int | None = None, seed: int = 0):
        query = np.asarray(query, dtype=float)
        reference = np.asarray(reference, dtype=float)
        depth = np.asarray(depth, dtype=float)
        if depth.ndim == 3:
            depth = depth[..., 0]
        if query.shape != reference.shape or query.shape[:2] != depth.shape:
            raise DimensionMismatchError(
                f"query {query.shape}, reference {reference.shape} and depth {depth.shape} differ"
            )
        if query.shape[:2] != K.shape:
            raise DimensionMismatchError("images do not match the intrinsics")
        H, W = depth.shape
        if stride is None:
            stride = 1 if H * W <= 640 * 480 else 2
        vv, uu = np.mgrid[0:H:stride, 0:W:stride]
        pix = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(float)
        z = depth[vv.ravel(), uu.ravel()]
        keep = (z > 0) & (z != DEPTH_SENTINEL) & np.isfinite(z)
        pix, z = pix[keep], z[keep]
        if max_samples is not None and len(pix) > max_samples:
            sel = np.sort(np.random.default_rng(seed).choice(len(pix), max_samples, replace=False))
            pix, z = pix[sel], z[sel]
        if len(pix) == 0:
            raise NoOverlapError("reference depth has no valid pixels")
        self.K = K
        self.query = query
        self.pixels = pix
        self.world = inverse(render_pose).transform(backproject_pixels(pix, z, K))
        self.ref_colors = reference[pix[:, 1].astype(int), pix[:, 0].astype(int)]

    def _forward(self, params: np.ndarray):
        q = params[:4]
        R = quats_to_rotmats(q[None])[0]
        cam = self.world @ R.T + params[4:]
        warped, z = project_points(cam, self.K)
        vals, du, dv, inb = bilinear_sample_many(self.query, np.where(np.isfinite(warped), warped, -1.0))
        valid = inb & (z > DEFAULT_DEPTH_EPS)
        return R, cam, warped, vals, du, dv, valid

    def valid_mask(self, params: np.ndarray, grid_margin: float = 0.0, border: float = 0.0) -> np.ndarray:
        _, _, warped, _, _, _, valid = self._forward(np.asarray(params, dtype=float))
        return valid & self._margin_mask(warped, grid_margin, border)

    def _margin_mask(self, warped, grid_margin, border):
        keep = np.ones(len(warped), dtype=bool)
        if grid_margin > 0:
            frac = warped - np.floor(warped)
            dist = np.minimum(frac, 1.0 - frac)
            keep &= np.all(dist > grid_margin, axis=1)
        if border > 0:
            H, W = self.K.shape
            keep &= (warped[:, 0] >= border) & (warped[:, 0] <= W - 1 - border)
            keep &= (warped[:, 1] >= border) & (warped[:, 1] <= H - 1 - border)
        return keep

    def loss(self, params, mask: np.ndarray | None = None) -> tuple[float, int]:
        params = np.asarray(params, dtype=float)
        _, _, _, vals, _, _, valid = self._forward(params)
        if mask is not None:
            valid = valid & mask
        n = int(valid.sum())
        if n == 0:
            raise NoOverlapError("no valid warp samples")
        r = vals[valid] - self.ref_colors[valid]
        return float(np.sum(np.linalg.norm(r, axis=1)) / n), n

    def loss_and_grad(self, params, mask: np.ndarray | None = None):
        """``(loss, grad (7,), n_valid)``."""
        params = np.asarray(params, dtype=float)
        R, cam, _, vals, du, dv, valid = self._forward(params)
        if mask is not None:
            valid = valid & mask
        n = int(valid.sum())
        if n == 0:
            raise NoOverlapError("no valid warp samples")
        r = vals[valid] - self.ref_colors[valid]
        norm = np.linalg.norm(r, axis=1)
        loss = float(norm.sum() / n)
        rhat = np.divide(r, norm[:, None], out=np.zeros_like(r), where=norm[:, None] > 0)
        g_u = np.sum(rhat * du[valid], axis=1) / n
        g_v = np.sum(rhat * dv[valid], axis=1) / n
        x, y, z = cam[valid, 0], cam[valid, 1], cam[valid, 2]
        fx, fy = self.K.fx, self.K.fy
        g_cam = np.stack([g_u * fx / z, g_v * fy / z, -(g_u * fx * x + g_v * fy * y) / (z * z)], axis=1)
        g_t = g_cam.sum(axis=0)
        g_R = g_cam.T @ self.world[valid]
        q = params[:4]
        qn = np.linalg.norm(q)
        qhat = q / qn
        g_qhat = np.einsum("kij,ij->k", rotmat_derivatives(qhat), g_R)
        g_q = (g_qhat - qhat * (qhat @ g_qhat)) / qn
        return loss, np.concatenate([g_q, g_t]), n


def warp_loss(q, q_r, z_r, render_pose: Pose, opt_pose: Pose, K: CameraIntrinsics, **kwargs) -> float:
    """Mean color residual norm between the warped query and the reference render."""
    problem = WarpProblem(q, q_r, z_r, render_pose, K, **kwargs)
    return problem.loss(opt_pose.as_array())[0]


@dataclass
class RefineResult:
    pose: Pose
    losses: list[float]
    best_iteration: int
    n_valid: list[int] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "n_valid"])
            for i, (loss, n) in enumerate(zip(self.losses, self.n_valid)):
                w.writerow([i, repr(loss), n])


def refine_warp(query, scene: Scene, coarse_pose: Pose, K: CameraIntrinsics,
                config: RefineConfig | None = None, keep_poses: bool = False) -> RefineResult:
    """Refine ``coarse_pose`` by minimizing the warp loss with Adam.

    The reference color and depth are rendered once at ``coarse_pose``. The
    iterate with the lowest loss is returned; ``losses[i]`` is the loss of
    iterate ``i`` (iterate 0 is the starting pose). The run stops early
    once the loss reaches round-off level.
    """
    config = config or RefineConfig()
    out = render(scene, coarse_pose, K, {"rgb", "depth"})
    problem = WarpProblem(query, out.rgb, out.depth, coarse_pose, K,
                          config.sample_stride, config.max_samples, config.seed)
    params = {"q": coarse_pose.rotation.as_array(), "t": coarse_pose.translation.copy()}
    opt = Adam({"q": config.lr, "t": config.lr})
    losses: list[float] = []
    counts: list[int] = []
    poses: list[Pose] = []
    best_loss, best_params, best_it = np.inf, np.concatenate([params["q"], params["t"]]), 0
    initial = None
    for it in range(config.iterations + 1):
        vec = np.concatenate([params["q"], params["t"]])
        try:
            loss, grad, n = problem.loss_and_grad(vec)
        except NoOverlapError:
            if it == 0:
                raise
            log.warning("warp refinement lost overlap at iteration %d", it)
            break
        losses.append(loss)
        counts.append(n)
        if keep_poses:
            poses.append(Pose.from_array(vec))
        if initial is None:
            initial = loss
        if loss < best_loss:
            best_loss, best_params, best_it = loss, vec, it
        if loss > config.divergence_factor * initial:
            raise DivergenceError(
                f"warp loss grew from {initial:.4g} to {loss:.4g}",
                {"iteration": it, "initial_loss": initial, "loss": loss, "best_pose": Pose.from_array(best_params),
                 "result": RefineResult(Pose.from_array(best_params), losses, best_it, counts, poses)},
            )
        if it == config.iterations or loss <= LOSS_FLOOR:
            break
        if config.tol > 0 and it > 0 and abs(losses[-2] - loss) < config.tol:
            break
        opt.step(params, {"q": grad[:4], "t": grad[4:]})
        params["q"] = params["q"] / np.linalg.norm(params["q"])
    return RefineResult(Pose.from_array(best_params), losses, best_it, counts, poses)


# -- feature-based refinement ------------------------------------------------------

@dataclass
class FeatureRefineResult:
    pose: Pose
    poses: list[Pose]
    matches: list[int]
    warning: str | None = None


def _offset_grid(step: float, half: float) -> np.ndarray:
    """Offsets in ``[-half, half]^2``, ordered so that the zero offset comes first."""
    r = np.arange(-half, half + 1e-9, step)
    g = np.array([(a, b) for a in r for b in r])
    return g[np.argsort(np.abs(g).sum(axis=1), kind="stable")]


SUBPIXEL_LEVELS = ((0.25, 0.5), (1.0 / 16.0, 0.25))  # (step, half-width) in pixels


def subpixel_match(qdesc: np.ndarray, features: np.ndarray, valid: np.ndarray,
                   pixels: np.ndarray) -> np.ndarray:
    """Move matched pixels to the location of highest cosine similarity.

    The rendered descriptor map is interpolated bilinearly and searched on
    two nested offset grids around each match; locations whose bilinear
    support touches an invalid pixel are skipped. The unshifted pixel is
    always a candidate and wins ties, so an exact match stays put.
    """
    best = np.asarray(pixels, dtype=float).copy()
    n, V = len(best), features.shape[2]
    for step, half in SUBPIXEL_LEVELS:
        offs = _offset_grid(step, half)
        cand = (best[:, None, :] + offs[None]).reshape(-1, 2)
        f, _, _, ok = bilinear_sample_many(features, cand)
        support, _, _, _ = bilinear_sample_many(valid.astype(float), cand)
        norm = np.linalg.norm(f, axis=1)
        ok &= (support[:, 0] > 1.0 - 1e-12) & (norm > 0)
        f = f / np.where(ok, norm, 1.0)[:, None]
        sim = np.einsum("nmv,nv->nm", f.reshape(n, len(offs), V), qdesc)
        sim = np.where(ok.reshape(n, len(offs)), sim, -np.inf)
        best = cand.reshape(n, len(offs), 2)[np.arange(n), np.argmax(sim, axis=1)]
    return best


def refine_feature(query, scene: Scene, pose: Pose, K: CameraIntrinsics, provider: DescriptorProvider,
                   rounds: int = 5, config: RefineConfig | None = None,
                   name: str | None = None) -> FeatureRefineResult:
    """Iterative render-match-PnP refinement.

    Each round renders descriptors and depth at the current pose and matches
    every query keypoint to the most similar rendered pixel with valid depth
    (optionally only mutual best pairs, optionally refined to sub-pixel
    precision). The matched locations are lifted to world points with the
    rendered depth, outliers are rejected with RANSAC and the pose is
    re-estimated with :func:`solve_pnp` on the trimmed inliers. If a round
    cannot produce a pose, the current pose is returned with ``warning`` set.
    """
    config = config or RefineConfig()
    if rounds < 1:
        raise InvalidInputError("rounds must be >= 1")
    if provider.feature_dim != scene.feature_dim:
        raise DimensionMismatchError(
            f"provider dimension {provider.feature_dim} != scene dimension {scene.feature_dim}"
        )
    kps = provider.sparse_keypoints(query, config.feature_keypoints, name=name)
    qn = np.linalg.norm(kps.descriptors, axis=1)
    q_ok = qn > 0
    qdesc = kps.descriptors[q_ok] / qn[q_ok, None]
    qpix = kps.pixels[q_ok]
    poses = [pose]
    matches = []
    for r in range(rounds):
        out = render(scene, pose, K, {"features", "depth"})
        depth = out.depth.reshape(-1)
        feats = out.features.reshape(-1, scene.feature_dim)
        fn = np.linalg.norm(feats, axis=1)
        valid = (depth != DEPTH_SENTINEL) & (fn > 0)
        cand = np.flatnonzero(valid)
        if len(cand) == 0 or len(qpix) < 4:
            return FeatureRefineResult(pose, poses, matches, f"round {r}: nothing to match")
        sim = qdesc @ (feats[cand] / fn[cand, None]).T
        j = np.argmax(sim, axis=1)
        keep = np.ones(len(j), dtype=bool)
        if config.feature_mutual:
            keep = np.argmax(sim, axis=0)[j] == np.arange(len(j))
        v, u = np.divmod(cand[j], K.width)
        rpix = np.stack([u, v], axis=1).astype(float)
        if config.feature_subpixel:
            rpix = subpixel_match(qdesc, out.features, valid.reshape(K.shape), rpix)
        z, _, _, z_ok = bilinear_sample_many(out.depth, rpix)
        keep &= z_ok & (z[:, 0] > 0)
        pix_q = qpix[keep]
        world = inverse(pose).transform(backproject_pixels(rpix[keep], z[keep, 0], K))
        matches.append(int(keep.sum()))
        try:
            res = ransac_pnp(pix_q, world, K, config.feature_ransac)
            err2 = _reproj_sq(res.pose.R, res.pose.translation, world, pix_q, K)
            fit = _trimmed_inliers(err2, config.feature_ransac.threshold)
            pose = solve_pnp(pix_q[fit], world[fit], K, initial=res.pose)
        except (InsufficientDataError, SolverFailureError, RansacFailureError) as exc:
            return FeatureRefineResult(pose, poses, matches, f"round {r}: {exc}")
        poses.append(pose)
    return FeatureRefineResult(pose, poses, matches)


# -- full pipeline ------------------------------------------------------------------

VARIANTS = ("coarse", "base", "fine")


@dataclass
class LocalizeConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    num_keypoints: int = DEFAULT_NUM_KEYPOINTS
    # when the warp stage trips its divergence guard, keep the best iterate
    # seen so far instead of raising
    divergence_fallback: bool = True


@dataclass
class LocalizeResult:
    pose: Pose
    variant: str
    coarse_pose: Pose
    feature_pose: Pose | None = None
    warp: RefineResult | None = None
    feature: FeatureRefineResult | None = None
    timings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def localize(query, scene: Scene, K: CameraIntrinsics, provider: DescriptorProvider,
             config: LocalizeConfig | None = None, variant: str = "base",
             name: str | None = None, coarse: Pose | None = None,
             keep_poses: bool = False) -> LocalizeResult:
    """Coarse, base (coarse + warp) or fine (coarse + feature + warp) localization.

    ``coarse`` may carry a precomputed coarse pose so several variants can
    share one RANSAC run; ``keep_poses`` keeps the warp-stage iterates.
    """
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    config = config or LocalizeConfig()
    timings = {}
    diagnostics = {}
    t0 = time.perf_counter()
    if coarse is None:
        res = localize_coarse(query, scene, K, provider, config.ransac, config.num_keypoints, name=name)
        coarse = res.pose
        diagnostics["ransac"] = res.diagnostics
    timings["coarse"] = time.perf_counter() - t0
    result = LocalizeResult(coarse, variant, coarse, timings=timings, diagnostics=diagnostics)
    if variant == "coarse":
        return result
    start = coarse
    if variant == "fine" and config.refine.feature_rounds > 0:
        t0 = time.perf_counter()
        fr = refine_feature(query, scene, coarse, K, provider, config.refine.feature_rounds,
                            config.refine, name=name)
        timings["feature"] = time.perf_counter() - t0
        if fr.warning:
            log.warning("feature refinement: %s", fr.warning)
        result.feature = fr
        result.feature_pose = fr.pose
        start = fr.pose
    t0 = time.perf_counter()
    try:
        wr = refine_warp(query, scene, start, K, config.refine, keep_poses=keep_poses)
    except DivergenceError as err:
        if not config.divergence_fallback:
            raise
        log.warning("warp refinement aborted (%s); keeping best iterate", err)
        wr = err.diagnostics["result"]
        diagnostics["warp_diverged"] = {k: v for k, v in err.diagnostics.items() if k != "result"}
    timings["warp"] = time.perf_counter() - t0
    result.warp = wr
    result.pose = wr.pose
    return result
