"""CPU rasterizer for feature-carrying 3D Gaussian scenes.

Rendering is split in two stages. :func:`rasterize` depends only on the
Gaussian geometry and the camera; it finds, for every pixel, the Gaussians
whose 3-sigma footprint covers it together with the unnormalized kernel
value ``exp(-d^T cov^-1 d / 2)``. :meth:`Rasterization.composite` then
alpha-blends colors, features and depths front to back for a given set of
opacities. The trainer keeps geometry fixed, so it rasterizes each training
view once and only re-runs the compositing step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError, InvalidInputError
from .geometry import (
    DEFAULT_DEPTH_EPS,
    CameraIntrinsics,
    Pose,
    Quaternion,
    quats_to_rotmats,
)

COV2D_FLOOR = 0.3
MAHALANOBIS_CUTOFF = 9.0  # 3 sigma, squared
MIN_ALPHA = 1.0 / 255.0
ALPHA_MIN_DEPTH = 0.5
DEPTH_SENTINEL = 0.0

ALL_CHANNELS = frozenset({"rgb", "features", "depth"})


@dataclass(frozen=True, eq=False)
class Gaussian:
    position: np.ndarray
    rotation: Quaternion
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float).reshape(3)
        if np.any(scale <= 0):
            raise InvalidInputError("Gaussian scales must be positive")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "opacity", float(np.clip(self.opacity, 0.0, 1.0)))
        object.__setattr__(self, "color", np.clip(np.asarray(self.color, dtype=float).reshape(3), 0, 1))
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=float).reshape(-1))


@dataclass(eq=False)
class Scene:
    """Struct-of-arrays container for ``N`` Gaussians with ``V``-dim features.

    ``rotations`` are ``(w, x, y, z)`` quaternions, ``scales`` per-axis
    standard deviations. Opacities and colors are clamped to ``[0, 1]``.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        self.opacities = np.clip(np.asarray(self.opacities, dtype=float).reshape(n), 0.0, 1.0)
        self.colors = np.clip(np.asarray(self.colors, dtype=float).reshape(n, 3), 0.0, 1.0)
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise DimensionMismatchError(f"features must have shape ({n}, V), got {feats.shape}")
        if feats.shape[1] < 1:
            raise InvalidInputError("feature dimension must be positive")
        self.features = feats
        self.background = np.asarray(self.background, dtype=float).reshape(3)
        if n and np.any(self.scales <= 0):
            raise InvalidInputError("Gaussian scales must be positive")
        if n and np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise InvalidInputError("zero-norm Gaussian rotation")

    @classmethod
    def empty(cls, feature_dim: int, background=(0.0, 0.0, 0.0)) -> "Scene":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, 3)), np.zeros((0, feature_dim)), np.asarray(background, dtype=float),
        )

    @classmethod
    def from_gaussians(cls, gaussians, feature_dim: int | None = None, background=(0.0, 0.0, 0.0)):
        gaussians = list(gaussians)
        if not gaussians:
            if feature_dim is None:
                raise InvalidInputError("feature_dim is required for an empty scene")
            return cls.empty(feature_dim, background)
        dim = feature_dim if feature_dim is not None else len(gaussians[0].feature)
        for g in gaussians:
            if len(g.feature) != dim:
                raise DimensionMismatchError(f"feature length {len(g.feature)} != {dim}")
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation.as_array() for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            np.stack([g.feature for g in gaussians]),
            np.asarray(background, dtype=float),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.positions[i], Quaternion.from_array(self.rotations[i]), self.scales[i],
            self.opacities[i], self.colors[i], self.features[i],
        )

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self[i] for i in range(len(self))]

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def replace(self, **changes) -> "Scene":
        return dataclasses.replace(self, **changes)

    def copy(self) -> "Scene":
        return Scene(
            self.positions.copy(), self.rotations.copy(), self.scales.copy(), self.opacities.copy(),
            self.colors.copy(), self.features.copy(), self.background.copy(),
        )

    def permuted(self, order) -> "Scene":
        order = np.asarray(order)
        return Scene(
            self.positions[order], self.rotations[order], self.scales[order], self.opacities[order],
            self.colors[order], self.features[order], self.background.copy(),
        )

    def diameter(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))


@dataclass
class RenderOutput:
    rgb: np.ndarray | None
    features: np.ndarray | None
    depth: np.ndarray | None
    alpha: np.ndarray

    @property
    def valid_depth(self) -> np.ndarray:
        return self.alpha >= ALPHA_MIN_DEPTH


def covariance_3d(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """``R S S^T R^T`` for each Gaussian."""
    R = quats_to_rotmats(rotations)
    M = R * scales[:, None, :]
    return M @ np.swapaxes(M, -1, -2)


def project_gaussians(scene: Scene, pose: Pose, K: CameraIntrinsics, near: float = DEFAULT_DEPTH_EPS):
    """Project all Gaussians of ``scene``.

    Returns ``(means2d, cov2d, depth, valid)``; entries with ``valid == False``
    are behind the near plane and must be culled.
    """
    n = len(scene)
    W = pose.R
    cam = scene.positions @ W.T + pose.translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * x / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * y / zs**2
    T = J @ W
    cov2d = T @ covariance_3d(scene.rotations, scene.scales) @ np.swapaxes(T, -1, -2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR
    means2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)
    return means2d, cov2d, z, valid


def project_gaussian(g: Gaussian, pose: Pose, K: CameraIntrinsics, near: float = DEFAULT_DEPTH_EPS):
    """Project one Gaussian; returns ``(center, cov2d, depth)`` or ``None`` if culled."""
    scene = Scene.from_gaussians([g])
    means2d, cov2d, z, valid = project_gaussians(scene, pose, K, near)
    if not valid[0]:
        return None
    return means2d[0], cov2d[0], float(z[0])


def depth_order(scene: Scene, depth: np.ndarray) -> np.ndarray:
    """Front-to-back rank of each Gaussian, with deterministic tie-breaking.

    Ties in depth are broken by the Gaussian's own attributes rather than its
    list index so that rendering does not depend on the scene ordering.
    """
    keys = (
        scene.opacities,
        scene.colors[:, 2], scene.colors[:, 1], scene.colors[:, 0],
        scene.positions[:, 2], scene.positions[:, 1], scene.positions[:, 0],
        depth,
    )
    order = np.lexsort(keys)
    rank = np.empty(len(scene), dtype=np.int64)
    rank[order] = np.arange(len(scene))
    return rank


@dataclass
class Composite:
    """Forward state of one compositing pass, reused by the backward pass."""

    alpha_hat: np.ndarray  # (nnz,) per-entry blending opacity, 0 where skipped
    A: np.ndarray  # (K, P) alpha_hat in slot-major layout
    T: np.ndarray  # (K, P) transmittance before each slot
    weights: np.ndarray  # (nnz,) alpha_hat * T
    weight_matrix: sp.csr_matrix  # (P, N)
    accum: np.ndarray  # (P,)


@dataclass
class Rasterization:
    """Pixel/Gaussian overlap lists of one view.

    Entry ``e`` says Gaussian ``gid[e]`` covers pixel ``pix[e]`` with kernel
    value ``kernel[e]``; ``slot[e]`` is its front-to-back position among the
    entries of that pixel.
    """

    height: int
    width: int
    n_gaussians: int
    pix: np.ndarray
    gid: np.ndarray
    kernel: np.ndarray
    slot: np.ndarray
    depth: np.ndarray  # per-Gaussian camera depth
    max_overlap: int

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def composite(self, opacities: np.ndarray) -> Composite:
        P, K = self.n_pixels, self.max_overlap
        ah = opacities[self.gid] * self.kernel
        ah = np.where(ah < MIN_ALPHA, 0.0, ah)
        A = np.zeros((K, P))
        A[self.slot, self.pix] = ah
        T = np.ones((K, P))
        if K > 1:
            np.cumprod(1.0 - A[:-1], axis=0, out=T[1:])
        w = ah * T[self.slot, self.pix]
        Wm = sp.csr_matrix((w, (self.pix, self.gid)), shape=(P, self.n_gaussians))
        accum = np.bincount(self.pix, weights=w, minlength=P)
        return Composite(ah, A, T, w, Wm, accum)

    def shade(self, comp: Composite, values: np.ndarray) -> np.ndarray:
        """``sum_i w_i v_i`` per pixel for per-Gaussian values ``(N, C)``."""
        if self.n_gaussians == 0:
            return np.zeros((self.n_pixels, values.shape[1]))
        return np.asarray(comp.weight_matrix @ values)

    def backward(
        self,
        comp: Composite,
        colors: np.ndarray,
        features: np.ndarray | None,
        background: np.ndarray,
        grad_rgb: np.ndarray | None,
        grad_features: np.ndarray | None,
    ):
        """Gradients of a scalar loss w.r.t. colors, features and opacities.

        ``grad_rgb`` is ``(P, 3)``, ``grad_features`` ``(P, V)``; either may be
        ``None``. Returns ``(d_colors, d_features, d_opacities)``.
        """
        P, K = self.n_pixels, self.max_overlap
        n = self.n_gaussians
        WT = comp.weight_matrix.T.tocsr()
        d_col = np.zeros((n, 3)) if grad_rgb is None else np.asarray(WT @ grad_rgb)
        d_feat = None
        if features is not None:
            d_feat = (
                np.zeros_like(features) if grad_features is None else np.asarray(WT @ grad_features)
            )

        # a_e: derivative of the loss w.r.t. the composited value carried by entry e,
        # measured relative to what lies behind it (background for rgb, 0 for features)
        a = np.zeros(len(self.gid))
        if grad_rgb is not None:
            a += np.einsum("ec,ec->e", grad_rgb[self.pix], colors[self.gid] - background)
        if grad_features is not None:
            a += np.einsum("ec,ec->e", grad_features[self.pix], features[self.gid])
        Aa = np.zeros((K, P))
        Aa[self.slot, self.pix] = a

        # behind[k]: sum over later slots m of a_m * alpha_m * prod_{k<j<m}(1 - alpha_j)
        behind = np.zeros((K, P))
        acc = np.zeros(P)
        for k in range(K - 1, -1, -1):
            behind[k] = acc
            acc = comp.A[k] * Aa[k] + (1.0 - comp.A[k]) * acc
        d_ah = comp.T[self.slot, self.pix] * (a - behind[self.slot, self.pix])
        d_ah = np.where(comp.alpha_hat > 0, d_ah, 0.0)
        d_op = np.bincount(self.gid, weights=d_ah * self.kernel, minlength=n)
        return d_col, d_feat, d_op


def rasterize(scene: Scene, pose: Pose, K: CameraIntrinsics, near: float = DEFAULT_DEPTH_EPS) -> Rasterization:
    H, W = K.shape
    n = len(scene)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Rasterization(H, W, 0, empty, empty, np.zeros(0), empty, np.zeros(0), 0)
    means2d, cov2d, depth, valid = project_gaussians(scene, pose, K, near)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    u0 = np.maximum(np.ceil(means2d[:, 0] - radius), 0).astype(np.int64)
    u1 = np.minimum(np.floor(means2d[:, 0] + radius), W - 1).astype(np.int64)
    v0 = np.maximum(np.ceil(means2d[:, 1] - radius), 0).astype(np.int64)
    v1 = np.minimum(np.floor(means2d[:, 1] + radius), H - 1).astype(np.int64)
    finite = np.isfinite(means2d).all(axis=1) & np.isfinite(radius)
    keep = valid & finite & (u1 >= u0) & (v1 >= v0)

    pix_parts, gid_parts, ker_parts = [], [], []
    for i in np.flatnonzero(keep):
        vv, uu = np.mgrid[v0[i] : v1[i] + 1, u0[i] : u1[i] + 1]
        du = uu.ravel() - means2d[i, 0]
        dv = vv.ravel() - means2d[i, 1]
        m = conic[i, 0] * du * du + 2.0 * conic[i, 1] * du * dv + conic[i, 2] * dv * dv
        inside = m <= MAHALANOBIS_CUTOFF
        if not inside.any():
            continue
        pix_parts.append((vv.ravel() * W + uu.ravel())[inside])
        gid_parts.append(np.full(int(inside.sum()), i, dtype=np.int64))
        ker_parts.append(np.exp(-0.5 * m[inside]))
    if not pix_parts:
        empty = np.zeros(0, dtype=np.int64)
        return Rasterization(H, W, n, empty, empty, np.zeros(0), empty, depth, 0)
    pix = np.concatenate(pix_parts)
    gid = np.concatenate(gid_parts)
    ker = np.concatenate(ker_parts)

    rank = depth_order(scene, np.where(valid, depth, np.inf))
    order = np.lexsort((rank[gid], pix))
    pix, gid, ker = pix[order], gid[order], ker[order]
    counts = np.bincount(pix, minlength=H * W)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(pix)) - starts[pix]
    return Rasterization(H, W, n, pix, gid, ker, slot, depth, int(counts.max()))


def composite_outputs(
    raster: Rasterization,
    comp: Composite,
    scene_colors: np.ndarray,
    scene_features: np.ndarray | None,
    background: np.ndarray,
    channels=ALL_CHANNELS,
) -> RenderOutput:
    H, W = raster.height, raster.width
    accum = comp.accum
    alpha = np.clip(accum, 0.0, 1.0).reshape(H, W)
    rgb = feats = depth = None
    if "rgb" in channels:
        rgb = raster.shade(comp, scene_colors) + background[None, :] * (1.0 - accum)[:, None]
        rgb = rgb.reshape(H, W, 3)
    if "features" in channels and scene_features is not None:
        feats = raster.shade(comp, scene_features).reshape(H, W, -1)
    if "depth" in channels:
        num = np.bincount(raster.pix, weights=comp.weights * raster.depth[raster.gid], minlength=H * W)
        ok = accum >= ALPHA_MIN_DEPTH
        depth = np.full(H * W, DEPTH_SENTINEL)
        depth[ok] = num[ok] / accum[ok]
        depth = depth.reshape(H, W)
    return RenderOutput(rgb, feats, depth, alpha)


def render(scene: Scene, pose: Pose, K: CameraIntrinsics, channels=ALL_CHANNELS) -> RenderOutput:
    """Render RGB, feature, depth and accumulated-alpha maps.

    ``channels`` selects any subset of ``{"rgb", "features", "depth"}``;
    alpha is always produced. Depth is the weight-normalized mean Gaussian
    depth and equals :data:`DEPTH_SENTINEL` where alpha < 0.5.
    """
    if isinstance(channels, str):
        channels = {channels}
    unknown = set(channels) - ALL_CHANNELS
    if unknown:
        raise InvalidInputError(f"unknown render channels: {sorted(unknown)}")
    raster = rasterize(scene, pose, K)
    comp = raster.composite(scene.opacities)
    return composite_outputs(raster, comp, scene.colors, scene.features, scene.background, channels)


def compositing_weights(scene: Scene, pose: Pose, K: CameraIntrinsics, pixel) -> list[tuple[int, float]]:
    """Front-to-back ``(gaussian index, alpha_hat * T)`` pairs at an integer pixel."""
    u, v = (int(round(c)) for c in np.asarray(pixel, dtype=float).reshape(2))
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise InvalidInputError(f"pixel {(u, v)} outside the image")
    raster = rasterize(scene, pose, K)
    if len(raster.pix) == 0:
        return []
    comp = raster.composite(scene.opacities)
    p = v * K.width + u
    sel = np.flatnonzero((raster.pix == p) & (comp.alpha_hat > 0))
    sel = sel[np.argsort(raster.slot[sel], kind="stable")]
    return [(int(raster.gid[e]), float(comp.weights[e])) for e in sel]
