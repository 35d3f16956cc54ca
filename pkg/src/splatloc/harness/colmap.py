"""Reader for COLMAP text models (``cameras.txt``, ``images.txt``, ``points3D.txt``).

COLMAP stores world-to-camera rotations as ``QW QX QY QZ`` and translations
``TX TY TZ``, which is already the convention used here. Its image
coordinates put the centre of the top-left pixel at ``(0.5, 0.5)``, so the
principal point is shifted by half a pixel on ingestion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InvalidInputError, ParseError
from ..geometry import CameraIntrinsics, Pose, Quaternion
from ..renderer import Scene

# model name -> number of parameters
SUPPORTED_MODELS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4, "SIMPLE_RADIAL": 4, "RADIAL": 5}
DEFAULT_SCALE = 0.01  # used when a point has no neighbour


class UnsupportedCameraError(InvalidInputError):
    pass


@dataclass
class ColmapModel:
    points: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) in [0, 1]
    point_ids: np.ndarray  # (N,)
    cameras: dict[int, CameraIntrinsics] = field(default_factory=dict)
    poses: dict[str, Pose] = field(default_factory=dict)
    image_camera: dict[str, int] = field(default_factory=dict)

    def intrinsics_of(self, name: str) -> CameraIntrinsics:
        return self.cameras[self.image_camera[name]]

    def to_scene(self, feature_dim: int, opacity: float = 0.5) -> Scene:
        """Initial Gaussians: one per point, isotropic scale from the nearest-neighbour distance."""
        n = len(self.points)
        if n == 0:
            return Scene.empty(feature_dim)
        scales = np.full(n, DEFAULT_SCALE)
        if n > 1:
            dist, _ = cKDTree(self.points).query(self.points, k=2)
            nn = dist[:, 1]
            scales = np.where(nn > 0, nn, DEFAULT_SCALE)
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        return Scene(self.points, rot, np.repeat(scales[:, None], 3, axis=1), np.full(n, opacity),
                     self.colors, np.zeros((n, feature_dim)))


def _lines(path: Path):
    if not path.exists():
        raise ParseError("file not found", path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if s.startswith("#"):
                continue
            yield lineno, s


def _floats(parts, path, lineno):
    try:
        return [float(x) for x in parts]
    except ValueError as exc:
        raise ParseError(str(exc), path, lineno) from None


def _ints(parts, path, lineno):
    try:
        return [int(x) for x in parts]
    except ValueError as exc:
        raise ParseError(str(exc), path, lineno) from None


def _camera(model: str, width: int, height: int, params: list[float]) -> CameraIntrinsics:
    if model == "SIMPLE_PINHOLE":
        f, cx, cy = params
        fx = fy = f
    elif model == "PINHOLE":
        fx, fy, cx, cy = params
    else:
        f, cx, cy, *dist = params
        if any(k != 0.0 for k in dist):
            raise UnsupportedCameraError(
                f"camera model {model} with non-zero distortion {dist} is not supported; undistort first"
            )
        fx = fy = f
    return CameraIntrinsics(fx, fy, cx - 0.5, cy - 0.5, width, height)


def read_cameras(path) -> dict[int, CameraIntrinsics]:
    path = Path(path)
    cams = {}
    for lineno, line in _lines(path):
        if not line:
            continue
        parts = line.split()
        if len(parts) < 4:
            raise ParseError(f"expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS, got {len(parts)} fields", path, lineno)
        model = parts[1]
        if model not in SUPPORTED_MODELS:
            raise UnsupportedCameraError(
                f"{path}:{lineno}: unsupported camera model {model}; supported: {', '.join(SUPPORTED_MODELS)}"
            )
        cam_id, width, height = _ints([parts[0], parts[2], parts[3]], path, lineno)
        params = _floats(parts[4:], path, lineno)
        if len(params) != SUPPORTED_MODELS[model]:
            raise ParseError(f"{model} takes {SUPPORTED_MODELS[model]} parameters, got {len(params)}", path, lineno)
        try:
            cams[cam_id] = _camera(model, width, height, params)
        except UnsupportedCameraError as exc:
            raise UnsupportedCameraError(f"{path}:{lineno}: {exc}") from None
        except InvalidInputError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return cams


def read_images(path) -> tuple[dict[str, Pose], dict[str, int]]:
    """Poses and camera ids keyed by image name.

    Each image takes two lines; the second (2D observations) may be empty
    and is ignored.
    """
    path = Path(path)
    poses, cams = {}, {}
    expect_points = False
    for lineno, line in _lines(path):
        if expect_points:
            expect_points = False
            continue
        if not line:
            continue
        parts = line.split()
        if len(parts) < 10:
            raise ParseError(
                f"expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME, got {len(parts)} fields", path, lineno
            )
        _ints(parts[:1], path, lineno)
        vals = _floats(parts[1:8], path, lineno)
        (cam_id,) = _ints(parts[8:9], path, lineno)
        name = " ".join(parts[9:])
        q = np.asarray(vals[:4])
        if np.linalg.norm(q) == 0:
            raise ParseError("zero quaternion", path, lineno)
        poses[name] = Pose(Quaternion.from_array(q / np.linalg.norm(q)), np.asarray(vals[4:]))
        cams[name] = cam_id
        expect_points = True
    if expect_points:
        raise ParseError("truncated file: image line without its 2D point line", path, lineno)
    return poses, cams


def read_points(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    path = Path(path)
    xyz, rgb, ids = [], [], []
    for lineno, line in _lines(path):
        if not line:
            continue
        parts = line.split()
        if len(parts) < 8:
            raise ParseError(f"expected POINT3D_ID X Y Z R G B ERROR TRACK, got {len(parts)} fields", path, lineno)
        (pid,) = _ints(parts[:1], path, lineno)
        x = _floats(parts[1:4], path, lineno)
        c = _ints(parts[4:7], path, lineno)
        _floats(parts[7:8], path, lineno)
        if len(parts[8:]) % 2:
            raise ParseError("track must hold IMAGE_ID POINT2D_IDX pairs", path, lineno)
        ids.append(pid)
        xyz.append(x)
        rgb.append(c)
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    rgb = np.asarray(rgb, dtype=float).reshape(-1, 3) / 255.0
    return xyz, rgb, np.asarray(ids, dtype=np.int64)


def load_colmap(directory) -> ColmapModel:
    d = Path(directory)
    cameras = read_cameras(d / "cameras.txt")
    poses, image_camera = read_images(d / "images.txt")
    for name, cid in image_camera.items():
        if cid not in cameras:
            raise ParseError(f"image {name!r} refers to unknown camera {cid}", d / "images.txt")
    pts, cols, ids = read_points(d / "points3D.txt")
    return ColmapModel(pts, cols, ids, cameras, poses, image_camera)
