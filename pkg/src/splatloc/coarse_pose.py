"""Coarse pose from 2D-3D descriptor matches: cosine matching, PnP, RANSAC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .descriptors import DEFAULT_NUM_KEYPOINTS, DescriptorProvider, KeypointSet
from .errors import (
    DimensionMismatchError,
    InsufficientDataError,
    InvalidInputError,
    RansacFailureError,
    SolverFailureError,
)
from .geometry import CameraIntrinsics, Pose, quat_from_rotvec, quat_to_rotmat, rotmat_to_quat
from .renderer import Scene

log = logging.getLogger(__name__)

MIN_PNP_POINTS = 4


@dataclass(frozen=True)
class Correspondence:
    pixel: tuple[float, float]
    point_index: int
    similarity: float


@dataclass
class Correspondences:
    """Array form of a list of :class:`Correspondence`."""

    pixels: np.ndarray
    point_index: np.ndarray
    similarity: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.point_index = np.asarray(self.point_index, dtype=np.int64).reshape(-1)
        self.similarity = np.asarray(self.similarity, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return len(self.pixels)

    def __iter__(self):
        for p, i, s in zip(self.pixels, self.point_index, self.similarity):
            yield Correspondence((float(p[0]), float(p[1])), int(i), float(s))

    def __getitem__(self, i: int) -> Correspondence:
        p = self.pixels[i]
        return Correspondence((float(p[0]), float(p[1])), int(self.point_index[i]), float(self.similarity[i]))

    def subset(self, mask) -> "Correspondences":
        return Correspondences(self.pixels[mask], self.point_index[mask], self.similarity[mask])


@dataclass
class RansacConfig:
    iterations: int = 20000
    threshold: float = 3.0  # pixels
    sample_size: int = 4
    seed: int = 0
    early_exit_ratio: float = 0.9
    chunk_size: int = 1000
    refit_rounds: int = 3

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError("RANSAC needs at least one iteration")
        if not self.threshold > 0:
            raise InvalidInputError("inlier threshold must be positive")
        if self.sample_size < MIN_PNP_POINTS:
            raise InvalidInputError(f"sample size must be >= {MIN_PNP_POINTS}")


# -- matching -----------------------------------------------------------------

def _unit_rows(x: np.ndarray):
    n = np.linalg.norm(x, axis=1)
    ok = n > 0
    out = np.zeros_like(x)
    out[ok] = x[ok] / n[ok, None]
    return out, ok


def match(query: KeypointSet, scene: Scene, mutual: bool = False) -> Correspondences:
    """Match each query keypoint to the scene Gaussian of highest cosine similarity.

    Ties go to the lowest Gaussian index. Zero-norm descriptors on either side
    are skipped. With ``mutual=True`` only mutual nearest neighbours are kept.
    """
    if len(scene) == 0:
        raise InvalidInputError("cannot match against an empty scene")
    if len(query) and query.dim != scene.feature_dim:
        raise DimensionMismatchError(
            f"query descriptors have dimension {query.dim}, scene has {scene.feature_dim}"
        )
    q, q_ok = _unit_rows(query.descriptors)
    p, p_ok = _unit_rows(scene.features)
    if not p_ok.any() or not q_ok.any():
        return Correspondences(np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    sim = q[q_ok] @ p.T
    sim[:, ~p_ok] = -np.inf
    best = np.argmax(sim, axis=1)
    best_sim = sim[np.arange(len(best)), best]
    rows = np.flatnonzero(q_ok)
    if mutual:
        back = np.argmax(sim, axis=0)
        keep = back[best] == np.arange(len(best))
        rows, best, best_sim = rows[keep], best[keep], best_sim[keep]
    return Correspondences(query.pixels[rows], best, best_sim)


# -- minimal solver -------------------------------------------------------------

def bearings(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float)
    rays = np.stack(
        [(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def _pmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of batched polynomials with ascending coefficients."""
    out = np.zeros(a.shape[:-1] + (a.shape[-1] + b.shape[-1] - 1,))
    for i in range(a.shape[-1]):
        out[..., i : i + b.shape[-1]] += a[..., i : i + 1] * b
    return out


def _pad(a: np.ndarray, n: int) -> np.ndarray:
    return np.concatenate([a, np.zeros(a.shape[:-1] + (n - a.shape[-1],))], axis=-1)


def _kabsch(P: np.ndarray, X: np.ndarray):
    """Batched rigid fit ``X ~ R P + t`` for ``(..., n, 3)`` point sets."""
    pc = P.mean(axis=-2, keepdims=True)
    xc = X.mean(axis=-2, keepdims=True)
    H = np.swapaxes(P - pc, -1, -2) @ (X - xc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = np.where(d == 0, 1.0, d)
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = xc[..., 0, :] - np.einsum("...ij,...j->...i", R, pc[..., 0, :])
    return R, t


def p3p(bear: np.ndarray, pts: np.ndarray):
    """Up to four poses from three bearing/point pairs, batched.

    ``bear`` and ``pts`` are ``(B, 3, 3)``. Returns ``R (B, 4, 3, 3)``,
    ``t (B, 4, 3)`` and ``ok (B, 4)``.

    With depths ``s2 = u s1`` and ``s3 = v s1`` the law of cosines for the
    three point pairs gives two conics in ``(u, v)``; their difference is
    linear in ``u``, and substituting back yields a quartic in ``v``.
    """
    B = bear.shape[0]
    j1, j2, j3 = bear[:, 0], bear[:, 1], bear[:, 2]
    ca = np.einsum("bi,bi->b", j2, j3)
    cb = np.einsum("bi,bi->b", j1, j3)
    cg = np.einsum("bi,bi->b", j1, j2)
    a2 = np.sum((pts[:, 1] - pts[:, 2]) ** 2, axis=1)
    b2 = np.sum((pts[:, 0] - pts[:, 2]) ** 2, axis=1)
    c2 = np.sum((pts[:, 0] - pts[:, 1]) ** 2, axis=1)
    ones = np.ones(B)
    M = np.stack([ones, -2 * cb, ones], axis=1)  # 1 + v^2 - 2 v cb
    k = c2 - a2
    N = np.stack([k - b2, -2 * cb * k, k + b2], axis=1)
    D = np.stack([-2 * b2 * cg, 2 * b2 * ca], axis=1)
    D2 = _pmul(D, D)
    quart = (
        b2[:, None] * _pmul(N, N)
        - 2 * (b2 * cg)[:, None] * _pad(_pmul(N, D), 5)
        + b2[:, None] * _pad(D2, 5)
        - c2[:, None] * _pmul(M, D2)
    )
    scale = np.max(np.abs(quart), axis=1, keepdims=True)
    scale[scale == 0] = 1.0
    quart = quart / scale
    lead = quart[:, 4]
    usable = np.abs(lead) > 1e-12
    lead_safe = np.where(usable, lead, 1.0)
    comp = np.zeros((B, 4, 4))
    comp[:, 1:, :3] = np.eye(3)
    comp[:, :, 3] = -quart[:, :4] / lead_safe[:, None]
    roots = np.linalg.eigvals(comp)
    v = roots.real
    real = np.abs(roots.imag) <= 1e-6 * (1.0 + np.abs(roots.real))
    # polish eigenvalue roots with two Newton steps
    for _ in range(2):
        pv = np.zeros_like(v)
        dv = np.zeros_like(v)
        for c in range(4, -1, -1):
            dv = dv * v + pv
            pv = pv * v + quart[:, c : c + 1]
        step = np.where(np.abs(dv) > 1e-300, pv / np.where(dv == 0, 1.0, dv), 0.0)
        v = v - step
    Dv = D[:, :1] + D[:, 1:2] * v
    Nv = N[:, :1] + N[:, 1:2] * v + N[:, 2:3] * v * v
    Mv = M[:, :1] + M[:, 1:2] * v + M[:, 2:3] * v * v
    with np.errstate(divide="ignore", invalid="ignore"):
        u = Nv / Dv
        s1 = np.sqrt(b2[:, None] / Mv)
    ok = usable[:, None] & real & (v > 0) & (u > 0) & np.isfinite(u) & np.isfinite(s1) & (Mv > 0)
    s1 = np.where(ok, s1, 1.0)
    u = np.where(ok, u, 1.0)
    v = np.where(ok, v, 1.0)
    X = np.stack(
        [s1[..., None] * j1[:, None], (u * s1)[..., None] * j2[:, None], (v * s1)[..., None] * j3[:, None]],
        axis=2,
    )  # (B, 4, 3, 3)
    P = np.broadcast_to(pts[:, None], X.shape)
    R, t = _kabsch(P, X)
    ok &= np.isfinite(R).all(axis=(-1, -2)) & np.isfinite(t).all(axis=-1)
    return R, t, ok


def _reproj_sq(R, t, pts, pixels, K):
    """Squared reprojection errors; ``inf`` for points not in front of the camera."""
    cam = np.einsum("...ij,...nj->...ni", R, pts) + t[..., None, :]
    z = cam[..., 2]
    zs = np.where(z > 1e-9, z, 1.0)
    du = K.fx * cam[..., 0] / zs + K.cx - pixels[..., 0]
    dv = K.fy * cam[..., 1] / zs + K.cy - pixels[..., 1]
    return np.where(z > 1e-9, du * du + dv * dv, np.inf)


def minimal_pnp(pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics):
    """Batched 4-point solver: P3P on the first three, disambiguated by the fourth.

    ``pixels (B, 4, 2)``, ``points (B, 4, 3)``. Returns ``R (B, 3, 3)``,
    ``t (B, 3)`` and a validity mask.
    """
    bear = bearings(pixels[:, :3], K)
    R, t, ok = p3p(bear, points[:, :3])
    err = _reproj_sq(R, t, points[:, None, 3:4], pixels[:, None, 3:4], K)[..., 0]
    err = np.where(ok, err, np.inf)
    best = np.argmin(err, axis=1)
    idx = np.arange(len(best))
    valid = np.isfinite(err[idx, best])
    return R[idx, best], t[idx, best], valid


# -- nonlinear refinement ---------------------------------------------------------

def _residuals(R, t, pts, pixels, K):
    cam = pts @ R.T + t
    z = cam[:, 2]
    if np.any(z <= 1e-9):
        return None, cam
    r = np.stack([K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy], axis=1) - pixels
    return r.ravel(), cam


def _jacobian(cam, K):
    n = len(cam)
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = K.fx / z
    Jp[:, 0, 2] = -K.fx * x / z**2
    Jp[:, 1, 1] = K.fy / z
    Jp[:, 1, 2] = -K.fy * y / z**2
    rp = cam
    # left update cam' = exp(w) cam + dt, so d cam / d w = -[cam]_x
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2] = rp[:, 2], -rp[:, 1]
    S[:, 1, 0], S[:, 1, 2] = -rp[:, 2], rp[:, 0]
    S[:, 2, 0], S[:, 2, 1] = rp[:, 1], -rp[:, 0]
    J = np.concatenate([Jp @ S, Jp], axis=2)
    return J.reshape(2 * n, 6)


def refine_pose_lm(R, t, pts, pixels, K, max_iter: int = 100, weights=None):
    """Levenberg-Marquardt on the (optionally per-point weighted) reprojection error.

    Returns ``(R, t, cost)``.
    """
    sw = None if weights is None else np.repeat(np.sqrt(np.asarray(weights, dtype=float)), 2)

    def residuals(R, t):
        r, cam = _residuals(R, t, pts, pixels, K)
        return (r if r is None or sw is None else r * sw), cam

    r, cam = residuals(R, t)
    if r is None:
        return R, t, np.inf
    cost = float(r @ r)
    lam = 1e-4
    for _ in range(max_iter):
        J = _jacobian(cam, K)
        if sw is not None:
            J = J * sw[:, None]
        A = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e12:
            try:
                delta = -np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = quat_to_rotmat(quat_from_rotvec(delta[:3]))
            R_new = dR @ R
            t_new = dR @ t + delta[3:]
            r_new, cam_new = residuals(R_new, t_new)
            if r_new is not None and float(r_new @ r_new) <= cost:
                step = np.linalg.norm(delta)
                R, t, r, cam = R_new, t_new, r_new, cam_new
                cost_old, cost = cost, float(r_new @ r_new)
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or step < 1e-15 or cost_old - cost <= 1e-18 * max(cost_old, 1e-300):
            break
    return R, t, cost


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def _check_pnp_input(pixels, points):
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pixels) != len(points):
        raise InvalidInputError("pixel and point counts differ")
    if len(pixels) < MIN_PNP_POINTS:
        raise InsufficientDataError(f"PnP needs at least {MIN_PNP_POINTS} correspondences, got {len(pixels)}")
    return pixels, points


def _is_degenerate(pixels, points) -> bool:
    pix_spread = np.linalg.svd(pixels - pixels.mean(axis=0), compute_uv=False)
    pts_spread = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if pix_spread[0] < 1e-9 or pts_spread[0] < 1e-12:
        return True
    # collinear world points leave the rotation about their line undetermined
    return pts_spread[1] < 1e-9 * pts_spread[0] or pix_spread[1] < 1e-9 * pix_spread[0]


def solve_pnp(pixels, points, K: CameraIntrinsics, initial: Pose | None = None, seed: int = 0) -> Pose:
    """Pose minimizing the reprojection error of ``points`` onto ``pixels``.

    Without an initial guess, minimal solutions on a fixed set of
    deterministic 4-point subsets seed the search; the candidate with the
    smallest median error is then polished with Levenberg-Marquardt on all
    correspondences.
    """
    pixels, points = _check_pnp_input(pixels, points)
    if _is_degenerate(pixels, points):
        raise SolverFailureError("degenerate PnP configuration")
    n = len(pixels)
    cands = []
    if initial is not None:
        cands.append((initial.R, initial.translation))
    else:
        rng = np.random.default_rng(seed)
        subsets = [np.arange(4)]
        subsets += [rng.choice(n, 4, replace=False) for _ in range(min(32, 8 * n))]
        idx = np.stack(subsets)
        R, t, ok = minimal_pnp(pixels[idx], points[idx], K)
        for i in np.flatnonzero(ok):
            cands.append((R[i], t[i]))
    if not cands:
        raise SolverFailureError("no minimal solution found")
    Rs = np.stack([c[0] for c in cands])
    ts = np.stack([c[1] for c in cands])
    err = np.median(_reproj_sq(Rs, ts, points, pixels, K), axis=1)
    order = np.argsort(err, kind="stable")
    best = None
    for i in order[:3]:
        if not np.isfinite(err[i]):
            break
        R, t, cost = refine_pose_lm(Rs[i], ts[i], points, pixels, K)
        if best is None or cost < best[2]:
            best = (R, t, cost)
    if best is None or not np.isfinite(best[2]):
        raise SolverFailureError("PnP failed to find a pose with all points in front of the camera")
    R = _orthonormalize(best[0])
    pose = Pose(rotmat_to_quat(R), best[1])
    if np.any(pose.transform(points)[:, 2] <= 0):
        raise SolverFailureError("PnP solution places points behind the camera")
    return pose


# -- RANSAC -----------------------------------------------------------------------

def _sample_indices(rng: np.random.Generator, n: int, k: int, count: int) -> np.ndarray:
    """``count`` rows of ``k`` distinct indices in ``[0, n)``."""
    chosen = np.empty((count, k), dtype=np.int64)
    for j in range(k):
        x = rng.integers(0, n - j, size=count)
        prev = np.sort(chosen[:, :j], axis=1)
        for c in range(j):
            x = x + (x >= prev[:, c])
        chosen[:, j] = x
    return chosen


def _trimmed_inliers(err2: np.ndarray, threshold: float) -> np.ndarray:
    """Inliers used for refitting: below ``threshold`` and below three robust sigmas.

    The sigma estimate comes from the median absolute residual of the plain
    inliers; a floor of 5% of ``threshold`` keeps noiseless data from
    trimming everything.
    """
    err = np.sqrt(err2)
    inl = err < threshold
    if not inl.any():
        return inl
    sigma = 1.4826 * np.median(err[inl])
    return inl & (err < max(3.0 * sigma, 0.05 * threshold))


def _toward(pose: Pose, target: Pose, s: float) -> Pose:
    """Pose a fraction ``s`` of the way from ``pose`` to ``target`` (geodesic rotation, linear t)."""
    dR = target.R @ pose.R.T
    w = Rotation.from_matrix(dR).as_rotvec()
    R = quat_to_rotmat(quat_from_rotvec(s * w)) @ pose.R
    return Pose(rotmat_to_quat(_orthonormalize(R)), (1 - s) * pose.translation + s * target.translation)


def _keep_count_step(pose: Pose, cand: Pose, count: int, points, pixels, K, thr2: float,
                     steps: int = 12) -> Pose | None:
    """Furthest pose from ``pose`` toward ``cand`` that keeps at least ``count`` inliers."""
    lo, hi, best = 0.0, 1.0, None
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        p = _toward(pose, cand, mid)
        if np.sum(_reproj_sq(p.R, p.translation, points, pixels, K) < thr2) >= count:
            lo, best = mid, p
        else:
            hi = mid
    return best


def _constrained_refit(pose: Pose, inliers: np.ndarray, fit: np.ndarray, points, pixels, K,
                       thr2: float, rounds: int = 10) -> Pose | None:
    """Weighted least-squares refit that keeps every current inlier inside the threshold.

    The trimmed fit set starts at weight 1 and the remaining inliers at a
    small weight; inliers pushed near or past the threshold are up-weighted
    until none is lost. Returns ``None`` if that does not happen in ``rounds``.
    """
    idx = np.flatnonzero(inliers)
    w = np.where(fit[idx], 1.0, 1e-3)
    count = len(idx)
    R, t = pose.R, pose.translation
    for _ in range(rounds):
        R, t, cost = refine_pose_lm(R, t, points[idx], pixels[idx], K, weights=w)
        if not np.isfinite(cost):
            return None
        err2 = _reproj_sq(R, t, points, pixels, K)
        if np.sum(err2 < thr2) >= count:
            return Pose(rotmat_to_quat(_orthonormalize(R)), t)
        w = np.where(err2[idx] >= 0.81 * thr2, 10.0 * w, w)
    return None


@dataclass
class RansacResult:
    pose: Pose
    inliers: np.ndarray
    iterations: int
    hypothesis_inliers: int
    diagnostics: dict = field(default_factory=dict)


def ransac_pnp(pixels, points, K: CameraIntrinsics, config: RansacConfig | None = None) -> RansacResult:
    """Robust PnP: seeded minimal-sample hypotheses, best inlier count wins.

    Hypotheses are scored in chunks; the winner is the first hypothesis with
    the highest inlier count. It is then refitted with :func:`solve_pnp` on
    its inliers, trimmed of residuals far outside the robust noise scale.
    A refit that would lose inliers is redone with the endangered inliers
    up-weighted (or, failing that, followed only part of the way), so
    refitting never lowers the count. The returned mask marks every
    correspondence within ``threshold`` of the final pose.
    """
    config = config or RansacConfig()
    pixels, points = _check_pnp_input(pixels, points)
    n = len(pixels)
    if n < config.sample_size:
        raise InsufficientDataError(f"RANSAC needs at least {config.sample_size} correspondences")
    rng = np.random.default_rng(config.seed)
    thr2 = config.threshold**2
    best_count, best_R, best_t, best_iter = -1, None, None, -1
    done = 0
    while done < config.iterations:
        m = min(config.chunk_size, config.iterations - done)
        idx = _sample_indices(rng, n, config.sample_size, m)
        R, t, ok = minimal_pnp(pixels[idx], points[idx], K)
        counts = np.full(m, -1)
        if ok.any():
            err = _reproj_sq(R[ok], t[ok], points[None], pixels[None], K)
            counts[ok] = np.sum(err < thr2, axis=1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best_R, best_t, best_iter = int(counts[j]), R[j], t[j], done + j
        done += m
        if best_count > config.early_exit_ratio * n:
            break
    diagnostics = {"iterations": done, "best_count": best_count, "best_iteration": best_iter, "n": n}
    if best_count < config.sample_size:
        raise RansacFailureError(
            f"no hypothesis reached {config.sample_size} inliers (best {best_count} of {n})", diagnostics
        )
    pose = Pose(rotmat_to_quat(_orthonormalize(best_R)), best_t)
    err2 = _reproj_sq(pose.R, pose.translation, points, pixels, K)
    inliers = err2 < thr2
    fit_set = None
    for _ in range(config.refit_rounds):
        fit = _trimmed_inliers(err2, config.threshold)
        if fit_set is not None and np.array_equal(fit, fit_set):
            break
        fit_set = fit
        try:
            cand = solve_pnp(pixels[fit], points[fit], K, initial=pose)
        except (SolverFailureError, InsufficientDataError):
            break
        cand_err2 = _reproj_sq(cand.R, cand.translation, points, pixels, K)
        if np.sum(cand_err2 < thr2) < inliers.sum():
            # the least-squares refit dropped a borderline inlier: refit with
            # those points up-weighted, or failing that move toward the refit
            # only as far as the inlier count allows, and stop there
            step = _constrained_refit(cand, inliers, fit, points, pixels, K, thr2)
            if step is None:
                step = _keep_count_step(pose, cand, int(inliers.sum()), points, pixels, K, thr2)
            if step is not None:
                pose = step
                inliers = _reproj_sq(pose.R, pose.translation, points, pixels, K) < thr2
            break
        pose, err2 = cand, cand_err2
        inliers = err2 < thr2
    diagnostics["final_inliers"] = int(inliers.sum())
    return RansacResult(pose, inliers, done, best_count, diagnostics)


def localize_coarse(
    image: np.ndarray,
    scene: Scene,
    K: CameraIntrinsics,
    provider: DescriptorProvider,
    config: RansacConfig | None = None,
    num_keypoints: int = DEFAULT_NUM_KEYPOINTS,
    name: str | None = None,
) -> RansacResult:
    """Keypoints -> cosine matches against every Gaussian -> RANSAC PnP."""
    if provider.feature_dim != scene.feature_dim:
        raise DimensionMismatchError(
            f"provider dimension {provider.feature_dim} != scene dimension {scene.feature_dim}"
        )
    kps = provider.sparse_keypoints(image, num_keypoints, name=name)
    corr = match(kps, scene)
    res = ransac_pnp(corr.pixels, scene.positions[corr.point_index], K, config)
    res.diagnostics["matches"] = len(corr)
    return res
