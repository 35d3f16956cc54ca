"""Descriptor providers standing in for a keypoint/descriptor network.

A provider turns an image into a dense per-pixel descriptor map and a sparse
set of reliable keypoints. Two providers are available:

* :class:`SyntheticProvider` knows the ground-truth scene. Images it produced
  (or that were registered with a pose) are answered by rendering the
  feature channels of that scene on a coarse grid, adding seeded Gaussian
  noise and bilinearly upsampling to full resolution.
* :class:`FileProvider` reads precomputed descriptor rasters and keypoint
  files from a directory, keyed by image name.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import DimensionMismatchError, InvalidInputError
from .geometry import CameraIntrinsics, Pose
from .renderer import Scene, render

log = logging.getLogger(__name__)

DEFAULT_FEATURE_DIM = 64
DEFAULT_NUM_KEYPOINTS = 1000


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, V)
    native_shape: tuple[int, int] = (0, 0)  # grid the descriptors were computed on
    stride: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise InvalidInputError(f"feature map must be (H, W, V), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("feature map contains non-finite values")
        if self.native_shape == (0, 0):
            self.native_shape = self.data.shape[:2]

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass
class KeypointSet:
    pixels: np.ndarray  # (k, 2) as (u, v)
    descriptors: np.ndarray  # (k, V)
    reliability: np.ndarray  # (k,)
    truncated: bool = False  # fewer keypoints available than requested

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.ndim == 1:
            self.descriptors = self.descriptors.reshape(len(self.pixels), -1)
        self.reliability = np.asarray(self.reliability, dtype=float).reshape(-1)
        if not (len(self.pixels) == len(self.descriptors) == len(self.reliability)):
            raise InvalidInputError("keypoint pixels, descriptors and reliability differ in length")

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def dim(self) -> int:
        return int(self.descriptors.shape[1])


def gradient_reliability(fmap: np.ndarray) -> np.ndarray:
    """Local gradient magnitude of a descriptor map, scaled to ``[0, 1]``."""
    gy, gx = np.gradient(fmap, axis=(0, 1))
    mag = np.sqrt(np.sum(gx * gx + gy * gy, axis=2))
    top = mag.max() if mag.size else 0.0
    return mag / top if top > 0 else np.zeros_like(mag)


def select_keypoints(fmap: np.ndarray, reliability: np.ndarray, k: int) -> KeypointSet:
    """Top-``k`` pixels by reliability; ties go to the earlier pixel in row-major order."""
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    H, W, V = fmap.shape
    flat = reliability.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    truncated = k > len(order)
    if truncated:
        log.warning("requested %d keypoints but only %d are available", k, len(order))
    order = order[:k]
    v, u = np.divmod(order, W)
    pixels = np.stack([u, v], axis=1).astype(float)
    return KeypointSet(pixels, fmap.reshape(-1, V)[order], flat[order], truncated)


def bilinear_upsample(coarse: np.ndarray, stride: int, out_shape: tuple[int, int]) -> np.ndarray:
    """Upsample a stride-``stride`` grid to full resolution.

    Coarse cell ``j`` is centred on full-resolution coordinate
    ``stride * j + (stride - 1) / 2``; coordinates past the outer cell
    centres are clamped.
    """
    H, W = out_shape
    h, w = coarse.shape[:2]

    def axis_weights(n_out, n_in):
        x = (np.arange(n_out) - (stride - 1) / 2.0) / stride
        x = np.clip(x, 0.0, n_in - 1)
        i0 = np.minimum(np.floor(x).astype(int), max(n_in - 2, 0))
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    r0, r1, fr = axis_weights(H, h)
    c0, c1, fc = axis_weights(W, w)
    top = coarse[r0][:, c0] * (1 - fc)[None, :, None] + coarse[r0][:, c1] * fc[None, :, None]
    bot = coarse[r1][:, c0] * (1 - fc)[None, :, None] + coarse[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def procedural_descriptors(n: int, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit descriptors; row ``i`` depends only on ``(seed, i)``."""
    out = np.empty((n, dim))
    for i in range(n):
        d = np.random.default_rng([seed, i]).normal(size=dim)
        out[i] = d / np.linalg.norm(d)
    return out


def image_key(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.float64))
    h = hashlib.sha1(arr.tobytes())
    h.update(str(arr.shape).encode())
    return h.hexdigest()


class DescriptorProvider:
    """Interface shared by all providers."""

    feature_dim: int

    def dense_features(self, image: np.ndarray, name: str | None = None) -> FeatureMap:
        raise NotImplementedError

    def reliability(self, fmap: FeatureMap) -> np.ndarray:
        return gradient_reliability(fmap.data)

    def sparse_keypoints(self, image: np.ndarray, k: int = DEFAULT_NUM_KEYPOINTS,
                         name: str | None = None) -> KeypointSet:
        if k < 1:
            raise InvalidInputError("k must be at least 1")
        fmap = self.dense_features(image, name=name)
        return select_keypoints(fmap.data, self.reliability(fmap), k)


@dataclass
class SyntheticProvider(DescriptorProvider):
    """Teacher oracle backed by a ground-truth scene.

    Query images are matched to poses by content hash; produce them with
    :meth:`render_image` or announce them with :meth:`register`.
    """

    scene: Scene
    intrinsics: CameraIntrinsics
    noise: float = 0.01
    stride: int = 8
    seed: int = 0
    _poses: dict[str, Pose] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.stride < 1:
            raise InvalidInputError("stride must be >= 1")
        if self.noise < 0:
            raise InvalidInputError("noise must be non-negative")

    @property
    def feature_dim(self) -> int:
        return self.scene.feature_dim

    def register(self, image: np.ndarray, pose: Pose) -> None:
        self._check_image(image)
        self._poses[image_key(image)] = pose

    def render_image(self, pose: Pose) -> np.ndarray:
        img = render(self.scene, pose, self.intrinsics, {"rgb"}).rgb
        self.register(img, pose)
        return img

    def pose_of(self, image: np.ndarray) -> Pose:
        key = image_key(image)
        if key not in self._poses:
            raise InvalidInputError("image unknown to the synthetic provider; register it first")
        return self._poses[key]

    def _check_image(self, image: np.ndarray) -> None:
        shape = np.shape(image)
        if len(shape) != 3 or shape[:2] != self.intrinsics.shape or shape[2] != 3:
            raise InvalidInputError(
                f"expected an image of shape {self.intrinsics.shape + (3,)}, got {shape}"
            )

    def coarse_intrinsics(self) -> CameraIntrinsics:
        s = self.stride
        K = self.intrinsics
        w = -(-K.width // s)
        h = -(-K.height // s)
        shift = (s - 1) / 2.0
        cx = min(max((K.cx - shift) / s, 0.0), w - 1e-9)
        cy = min(max((K.cy - shift) / s, 0.0), h - 1e-9)
        return CameraIntrinsics(K.fx / s, K.fy / s, cx, cy, w, h)

    def dense_features(self, image: np.ndarray, name: str | None = None) -> FeatureMap:
        self._check_image(image)
        pose = self.pose_of(image)
        Kc = self.coarse_intrinsics() if self.stride > 1 else self.intrinsics
        coarse = render(self.scene, pose, Kc, {"features"}).features
        if self.noise > 0:
            rng = np.random.default_rng([self.seed, int(image_key(image)[:8], 16)])
            coarse = coarse + rng.normal(scale=self.noise, size=coarse.shape)
        if self.stride == 1:
            full = coarse
        else:
            full = bilinear_upsample(coarse, self.stride, self.intrinsics.shape)
        return FeatureMap(full, coarse.shape[:2], self.stride)


@dataclass
class FileProvider(DescriptorProvider):
    """Reads ``<name>.frst`` descriptor rasters and optional ``<name>.kpts`` files."""

    directory: Path
    feature_dim: int

    def __post_init__(self):
        self.directory = Path(self.directory)

    def _name(self, name):
        if name is None:
            raise InvalidInputError("the file provider needs an image name")
        return name

    def dense_features(self, image: np.ndarray, name: str | None = None) -> FeatureMap:
        data = io.read_raster(self.directory / f"{self._name(name)}.frst")
        if image is not None and data.shape[:2] != np.shape(image)[:2]:
            raise InvalidInputError(
                f"descriptor raster is {data.shape[:2]} but the image is {np.shape(image)[:2]}"
            )
        if data.shape[2] != self.feature_dim:
            raise DimensionMismatchError(f"raster has {data.shape[2]} channels, expected {self.feature_dim}")
        return FeatureMap(data)

    def sparse_keypoints(self, image: np.ndarray, k: int = DEFAULT_NUM_KEYPOINTS,
                         name: str | None = None) -> KeypointSet:
        if k < 1:
            raise InvalidInputError("k must be at least 1")
        path = self.directory / f"{self._name(name)}.kpts"
        if not path.exists():
            return super().sparse_keypoints(image, k, name=name)
        pixels, rel, desc = io.read_keypoints(path)
        if len(pixels) and desc.shape[1] != self.feature_dim:
            raise DimensionMismatchError(f"keypoint descriptors have {desc.shape[1]} values")
        order = np.argsort(-rel, kind="stable")
        truncated = k > len(order)
        order = order[:k]
        return KeypointSet(pixels[order], desc[order].reshape(len(order), self.feature_dim),
                           rel[order], truncated)
