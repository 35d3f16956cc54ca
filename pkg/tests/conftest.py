import time

import numpy as np
import pytest

from splatloc.distill import TrainConfig, train
from splatloc.geometry import CameraIntrinsics, Pose, quat_from_rotvec
from splatloc.harness.synthetic import generate_world
from splatloc.renderer import Scene


def random_scene(rng, n=10, dim=4, spread=0.6, depth=3.0, scale=(0.08, 0.3), opacity=(0.2, 0.9),
                 background=None) -> Scene:
    """Gaussians scattered in front of an identity camera."""
    pos = rng.uniform(-spread, spread, size=(n, 3)) + [0.0, 0.0, depth]
    rot = rng.normal(size=(n, 4))
    scales = rng.uniform(*scale, size=(n, 3))
    op = rng.uniform(*opacity, size=n)
    col = rng.uniform(0, 1, size=(n, 3))
    feat = rng.normal(size=(n, dim))
    bg = rng.uniform(0, 1, size=3) if background is None else background
    return Scene(pos, rot, scales, op, col, feat, bg)


def small_camera(size=16, focal=None) -> CameraIntrinsics:
    f = focal or 1.2 * size
    return CameraIntrinsics(f, f, (size - 1) / 2, (size - 1) / 2, size, size)


def near_identity_pose(rng, rot=0.05, trans=0.05) -> Pose:
    return Pose(quat_from_rotvec(rng.normal(scale=rot, size=3)), rng.normal(scale=trans, size=3))


# wall-clock seconds of expensive session fixtures, for runtime budgets
timings: dict[str, float] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_world():
    """Default synthetic world (500 Gaussians, V = 16, 20 views), distilled for 3000 iterations."""
    t0 = time.perf_counter()
    world = generate_world(0, 500, 20, 16)
    provider = world.provider(noise=0.01, stride=1)
    views = world.training_views(provider)
    scene, history = train(world.initial_scene(), views, TrainConfig(iterations=3000, seed=0))
    timings["trained_world"] = time.perf_counter() - t0
    return world, provider, scene, history
