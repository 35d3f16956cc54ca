"""On-disk formats.

Scene file (``.splat``), little-endian::

    magic   4 bytes  b"SPLS"
    version uint32   1
    count   uint32   N
    dim     uint32   V
    bg      3 x float32
    N records of (14 + V) float32:
        position(3) rotation wxyz(4) scale(3) opacity(1) color(3) feature(V)

Float raster (``.frst``), little-endian::

    magic    4 bytes  b"FRST"
    version  uint32   1
    height   uint32
    width    uint32
    channels uint32
    height*width*channels float32, row-major (row, column, channel)

Intrinsics files hold a single ``fx fy cx cy width height`` line. Pose files are text, one ``name qw qx qy qz tx ty tz`` line per image with
world-to-camera poses. Keypoint files hold ``u v reliability d_1 .. d_V``
lines and correspondence dumps ``u v point_index similarity`` lines. Blank
lines and lines starting with ``#`` are ignored by all text readers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import CameraIntrinsics, Pose, Quaternion
from .renderer import Scene

SCENE_MAGIC = b"SPLS"
RASTER_MAGIC = b"FRST"
FORMAT_VERSION = 1


def write_scene(path, scene: Scene) -> None:
    header = SCENE_MAGIC + struct.pack("<III3f", FORMAT_VERSION, len(scene), scene.feature_dim,
                                       *scene.background)
    records = np.concatenate(
        [scene.positions, scene.rotations, scene.scales, scene.opacities[:, None],
         scene.colors, scene.features],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_scene(path) -> Scene:
    data = Path(path).read_bytes()
    if len(data) < 28 or data[:4] != SCENE_MAGIC:
        raise ParseError("not a scene file (bad magic)", path)
    version, n, dim, *bg = struct.unpack_from("<III3f", data, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported scene version {version}", path)
    width = 14 + dim
    body = np.frombuffer(data, dtype="<f4", offset=28)
    if body.size != n * width:
        raise ParseError(f"expected {n} records of {width} floats, found {body.size} floats", path)
    rec = body.reshape(n, width).astype(float)
    return Scene(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10], rec[:, 11:14], rec[:, 14:],
                 np.asarray(bg, dtype=float))


def write_raster(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<IIII", FORMAT_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_raster(path) -> np.ndarray:
    """Read a float raster as a float64 ``(H, W, C)`` array."""
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != RASTER_MAGIC:
        raise ParseError("not a float raster (bad magic)", path)
    version, h, w, c = struct.unpack_from("<IIII", data, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported raster version {version}", path)
    body = np.frombuffer(data, dtype="<f4", offset=20)
    if body.size != h * w * c:
        raise ParseError(f"raster body holds {body.size} floats, header says {h * w * c}", path)
    return body.reshape(h, w, c).astype(float)


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        fh.write("# fx fy cx cy width height (pixel centres at integer coordinates)\n")
        fh.write(f"{K.fx:.17g} {K.fy:.17g} {K.cx:.17g} {K.cy:.17g} {K.width} {K.height}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"expected 6 fields, got {len(parts)}", path, lineno)
        try:
            fx, fy, cx, cy = (float(x) for x in parts[:4])
            return CameraIntrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    raise ParseError("no intrinsics line found", path)


def write_poses(path, poses: dict[str, Pose]) -> None:
    with open(path, "w") as fh:
        fh.write("# name qw qx qy qz tx ty tz (world-to-camera)\n")
        for name, pose in poses.items():
            if any(ch.isspace() for ch in name):
                raise ValueError(f"image name {name!r} contains whitespace")
            vals = " ".join(f"{x:.17g}" for x in pose.as_array())
            fh.write(f"{name} {vals}\n")


def read_poses(path) -> dict[str, Pose]:
    poses: dict[str, Pose] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"expected 8 fields, got {len(parts)}", path, lineno)
        try:
            vals = np.array([float(x) for x in parts[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
        q = vals[:4]
        # stored quaternions are already unit; not renormalized so values round-trip exactly
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ParseError("quaternion is not unit-norm", path, lineno)
        poses[parts[0]] = Pose(Quaternion.from_array(q), vals[4:])
    return poses


def write_keypoints(path, pixels, reliability, descriptors) -> None:
    pixels = np.asarray(pixels, dtype=float)
    with open(path, "w") as fh:
        fh.write("# u v reliability d_1 ... d_V\n")
        for p, r, d in zip(pixels, reliability, descriptors):
            fh.write(" ".join(f"{x:.9g}" for x in (p[0], p[1], r, *d)) + "\n")


def read_keypoints(path):
    """Return ``(pixels, reliability, descriptors)`` arrays."""
    rows = []
    width = None
    for lineno, line in _data_lines(path):
        try:
            vals = [float(x) for x in line.split()]
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
        if len(vals) < 4:
            raise ParseError("keypoint line needs u, v, reliability and >= 1 descriptor value", path, lineno)
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ParseError(f"expected {width} fields, got {len(vals)}", path, lineno)
        rows.append(vals)
    if not rows:
        return np.zeros((0, 2)), np.zeros(0), np.zeros((0, 0))
    arr = np.asarray(rows)
    return arr[:, :2], arr[:, 2], arr[:, 3:]


def write_correspondences(path, pixels, point_index, similarity) -> None:
    with open(path, "w") as fh:
        fh.write("# u v point_index similarity\n")
        for p, i, s in zip(np.asarray(pixels, dtype=float), point_index, similarity):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {int(i)} {s:.9g}\n")


def read_correspondences(path):
    pix, idx, sim = [], [], []
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", path, lineno)
        try:
            pix.append((float(parts[0]), float(parts[1])))
            idx.append(int(parts[2]))
            sim.append(float(parts[3]))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return np.asarray(pix, dtype=float).reshape(-1, 2), np.asarray(idx, dtype=np.int64), np.asarray(sim)
