"""Rigid transforms, quaternions and pinhole projection.

Conventions used everywhere in the package:

* quaternions are ``(w, x, y, z)`` with ``w`` the scalar part;
* a :class:`Pose` maps world points to camera points, ``p_cam = R @ p_world + t``;
* pixel coordinates have their origin at the top-left corner and pixel
  centres at integer coordinates, ``u`` to the right and ``v`` down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, InvalidDepthError, InvalidInputError

DEFAULT_DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=float).reshape(4)
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)


def normalize(q) -> Quaternion:
    """Return the unit quaternion with the same direction as ``q``."""
    arr = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=float)
    n = np.linalg.norm(arr)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInputError("cannot normalize a zero-norm quaternion")
    return Quaternion.from_array(arr / n)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of ``(..., 4)`` arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion.

    The quaternion is normalized first, so ``q`` and ``s * q`` give the same
    matrix for any ``s != 0``.
    """
    arr = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=float)
    n = np.linalg.norm(arr)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInputError("zero-norm quaternion has no rotation")
    w, x, y, z = arr / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Batched :func:`quat_to_rotmat` for an ``(N, 4)`` array."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_derivatives(q: np.ndarray) -> np.ndarray:
    """Partial derivatives ``dR/dq_k`` of the unit-quaternion rotation formula.

    Returns a ``(4, 3, 3)`` array evaluated at the unit quaternion ``q``.
    """
    w, x, y, z = q
    return 2.0 * np.array(
        [
            [[w, -z, y], [z, w, -x], [-y, x, w]],
            [[x, y, z], [y, -x, -w], [z, w, -x]],
            [[-y, x, w], [x, y, z], [-w, z, -y]],
            [[-z, -w, x], [w, -z, y], [x, y, z]],
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> Quaternion:
    """Quaternion (with ``w >= 0``) of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return Quaternion.from_array(q)


def quat_from_rotvec(v) -> Quaternion:
    """Exponential map from an axis-angle vector (radians)."""
    v = np.asarray(v, dtype=float).reshape(3)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return normalize(np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]))
    axis = v / theta
    s = np.sin(0.5 * theta)
    return Quaternion(float(np.cos(0.5 * theta)), *(float(a) for a in axis * s))


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix."""
    c = 0.5 * (np.trace(R) - 1.0)
    # arccos loses precision near 0; the sine from the skew part does not
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform ``p_cam = R @ p_world + t``."""

    rotation: Quaternion = field(default_factory=Quaternion)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(rotmat_to_quat(R), np.asarray(t, dtype=float))

    @classmethod
    def from_array(cls, qt) -> "Pose":
        """Build from ``[qw, qx, qy, qz, tx, ty, tz]``; the quaternion is normalized."""
        qt = np.asarray(qt, dtype=float).reshape(7)
        return cls(normalize(qt[:4]), qt[4:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rotation.as_array(), self.translation])

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates, ``-R^T t``."""
        return -self.R.T @ self.translation

    def transform(self, points) -> np.ndarray:
        """Apply the pose to a point or an ``(N, 3)`` array of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.translation

    def __repr__(self) -> str:
        q = self.rotation
        t = self.translation
        return (
            f"Pose(q=({q.w:.6g}, {q.x:.6g}, {q.y:.6g}, {q.z:.6g}), "
            f"t=({t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}))"
        )


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first and then ``a``."""
    q = normalize(quat_multiply(a.rotation.as_array(), b.rotation.as_array()))
    t = a.R @ b.translation + a.translation
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    qc = p.rotation.conjugate()
    return Pose(qc, -quat_to_rotmat(qc) @ p.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InvalidInputError("image size must be integral")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.height), int(self.width))

    def pixel_grid(self) -> np.ndarray:
        """``(H*W, 2)`` array of integer pixel centres in row-major order."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(float)


def project(p_world, pose: Pose, K: CameraIntrinsics, eps: float = DEFAULT_DEPTH_EPS):
    """Project one world point; returns ``(pixel, depth)``."""
    x, y, z = pose.transform(np.asarray(p_world, dtype=float).reshape(3))
    if not z > eps:
        raise BehindCameraError(f"point depth {z:.3g} is not in front of the camera")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy]), float(z)


def project_points(points_cam: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of camera-frame points. No depth check."""
    pts = np.asarray(points_cam, dtype=float)
    z = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pts[..., 0] / z + K.cx
        v = K.fy * pts[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def backproject(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel with known depth to a camera-frame point."""
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def backproject_pixels(pixels: np.ndarray, depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (pixels[..., 0] - K.cx) / K.fx * depth
    y = (pixels[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, depth], axis=-1)


def rotation_error_deg(a: Pose, b: Pose) -> float:
    """Angle of the relative rotation between two poses, in degrees."""
    return float(np.degrees(rotation_angle(a.R @ b.R.T)))


def translation_error(a: Pose, b: Pose) -> float:
    """Distance between camera centres, in scene units."""
    return float(np.linalg.norm(a.camera_center() - b.camera_center()))


def random_quaternion(rng: np.random.Generator) -> Quaternion:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return Quaternion.from_array(q)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose.from_rt(R, -R @ eye)


def perturb_pose(pose: Pose, rot_deg: float, trans: float, rng: np.random.Generator) -> Pose:
    """Rotate the camera by ``rot_deg`` about a random axis and move its centre by ``trans``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dR = quat_to_rotmat(quat_from_rotvec(axis * np.radians(rot_deg)))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    R = dR @ pose.R
    center = pose.camera_center() + trans * direction
    return Pose.from_rt(R, -R @ center)
