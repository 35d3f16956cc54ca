"""Procedural desk-scale worlds with known geometry, appearance and descriptors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..descriptors import SyntheticProvider, procedural_descriptors
from ..distill import TrainView
from ..errors import InvalidInputError
from ..geometry import CameraIntrinsics, Pose, look_at
from ..renderer import Scene, render


@dataclass
class WorldConfig:
    width: int = 80
    height: int = 60
    focal: float = 70.0
    # half-sizes of the box the Gaussians are sampled in (metres); a thin
    # slab keeps the scene close to a surface, like clutter on a desk
    extent: tuple[float, float, float] = (0.25, 0.25, 0.04)
    orbit_radius: float = 0.6
    radius_jitter: float = 0.15
    elevation_deg: tuple[float, float] = (35.0, 70.0)
    target_jitter: float = 0.03
    scale_range: tuple[float, float] = (0.01, 0.025)
    opacity_range: tuple[float, float] = (0.6, 0.95)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    min_coverage: float = 0.5
    max_retries: int = 50

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                                self.width, self.height)


@dataclass
class SyntheticWorld:
    scene: Scene
    poses: list[Pose]
    intrinsics: CameraIntrinsics
    seed: int
    config: WorldConfig = field(default_factory=WorldConfig)

    @property
    def diameter(self) -> float:
        return self.scene.diameter()

    def provider(self, noise: float = 0.01, stride: int = 1, seed: int | None = None) -> SyntheticProvider:
        return SyntheticProvider(self.scene, self.intrinsics, noise=noise, stride=stride,
                                 seed=self.seed if seed is None else seed)

    def sample_poses(self, n: int, seed: int) -> list[Pose]:
        """Extra poses from the same camera distribution, checked for coverage."""
        rng = np.random.default_rng([self.seed, seed, 1])
        return [_covered_pose(self.scene, self.intrinsics, self.config, rng) for _ in range(n)]

    def training_views(self, provider: SyntheticProvider) -> list[TrainView]:
        views = []
        for pose in self.poses:
            img = provider.render_image(pose)
            views.append(TrainView(img, provider.dense_features(img).data, pose, self.intrinsics))
        return views

    def initial_scene(self) -> Scene:
        """Ground-truth geometry with neutral appearance: the trainer's starting point."""
        n = len(self.scene)
        return self.scene.replace(
            colors=np.full((n, 3), 0.5),
            opacities=np.full(n, 0.5),
            features=np.zeros((n, self.scene.feature_dim)),
        )


def _orbit_pose(cfg: WorldConfig, rng: np.random.Generator) -> Pose:
    azim = rng.uniform(0, 2 * np.pi)
    elev = np.radians(rng.uniform(*cfg.elevation_deg))
    r = cfg.orbit_radius * (1.0 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter))
    eye = r * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
    target = rng.uniform(-cfg.target_jitter, cfg.target_jitter, size=3)
    return look_at(eye, target, up=(0.0, 0.0, 1.0))


def _covered_pose(scene: Scene, K: CameraIntrinsics, cfg: WorldConfig, rng: np.random.Generator) -> Pose:
    for _ in range(cfg.max_retries):
        pose = _orbit_pose(cfg, rng)
        if coverage(scene, pose, K) > cfg.min_coverage:
            return pose
    raise InvalidInputError(
        f"could not find a camera with mean alpha > {cfg.min_coverage} after {cfg.max_retries} tries"
    )


def coverage(scene: Scene, pose: Pose, K: CameraIntrinsics) -> float:
    return float(render(scene, pose, K, set()).alpha.mean())


def _smooth_colors(pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # low-frequency color field plus per-Gaussian variation
    freq = rng.normal(scale=2.0, size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    field_ = 0.5 + 0.3 * np.sin(pos @ freq.T + phase)
    return np.clip(field_ + rng.uniform(-0.2, 0.2, size=pos.shape), 0.0, 1.0)


def generate_world(seed: int = 0, n_gaussians: int = 500, n_views: int = 20, feature_dim: int = 64,
                   config: WorldConfig | None = None) -> SyntheticWorld:
    """Random Gaussians in a box seen by cameras on a jittered orbit.

    Every camera looks at the box and renders with mean accumulated alpha
    above ``config.min_coverage``; the same seed gives the same world.
    """
    cfg = config or WorldConfig()
    if n_gaussians < 1 or n_views < 1:
        raise InvalidInputError("need at least one Gaussian and one view")
    rng = np.random.default_rng(seed)
    half = np.asarray(cfg.extent, dtype=float)
    pos = rng.uniform(-half, half, size=(n_gaussians, 3))
    rot = rng.normal(size=(n_gaussians, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    lo, hi = np.log(cfg.scale_range[0]), np.log(cfg.scale_range[1])
    scales = np.exp(rng.uniform(lo, hi, size=(n_gaussians, 3)))
    opac = rng.uniform(*cfg.opacity_range, size=n_gaussians)
    colors = _smooth_colors(pos / half.max(), rng)
    feats = procedural_descriptors(n_gaussians, feature_dim, seed)
    scene = Scene(pos, rot, scales, opac, colors, feats, np.asarray(cfg.background, dtype=float))
    K = cfg.intrinsics()
    poses = [_covered_pose(scene, K, cfg, rng) for _ in range(n_views)]
    return SyntheticWorld(scene, poses, K, seed, cfg)

