"""Rigid poses, pinhole cameras and quaternion helpers.

Quaternions are stored scalar-first ``(w, x, y, z)``. A :class:`Pose` maps world
points into the camera frame (camera-from-world).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera

DEPTH_EPSILON = 1e-6


def hat(v):
    """Skew-symmetric matrix of a 3-vector, so that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices from (possibly batched) unit quaternions ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
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


def rotmat_to_quat(R):
    """Unit quaternion with non-negative scalar part for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
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
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def so3_exp(omega):
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1 - np.cos(theta)) / theta**2 * K @ K)


def so3_log(R):
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # axis from the symmetric part; sign is arbitrary at exactly pi
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * w


def _left_jacobian(omega):
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


@dataclass(frozen=True)
class Pose:
    """Camera-from-world rigid transform: ``x_cam = R @ x_world + t``."""

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3).copy())

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self):
        return quat_to_rotmat(self.rotation)

    @property
    def t(self):
        return self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        q = quat_normalize(quat_multiply(self.rotation, other.rotation))
        return Pose(q, self.R @ other.translation + self.translation)

    def inverse(self) -> Pose:
        w, x, y, z = self.rotation
        q = np.array([w, -x, -y, -z])
        return Pose(q, -(quat_to_rotmat(q) @ self.translation))

    def camera_center(self):
        return -self.R.T @ self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


def se3_exp(twist) -> Pose:
    """Exponential map of a twist ``[omega; v]``."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    omega, v = twist[:3], twist[3:]
    R = so3_exp(omega)
    return Pose(rotmat_to_quat(R), _left_jacobian(omega) @ v)


def se3_log(pose: Pose):
    omega = so3_log(pose.R)
    v = np.linalg.solve(_left_jacobian(omega), pose.translation)
    return np.concatenate([omega, v])


def rotation_angle_between(a: Pose, b: Pose):
    """Geodesic angle (radians) between the rotations of two poses."""
    dR = a.R @ b.R.T
    return float(np.arccos(np.clip((np.trace(dR) - 1.0) / 2.0, -1.0, 1.0)))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def focal(self):
        """Single focal length used for world-space sizing."""
        return 0.5 * (self.fx + self.fy)

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def contains(self, pixels):
        pixels = np.asarray(pixels)
        return ((pixels[..., 0] >= -0.5) & (pixels[..., 0] < self.width - 0.5)
                & (pixels[..., 1] >= -0.5) & (pixels[..., 1] < self.height - 0.5))


def project_point(pose: Pose, K: Intrinsics, world_point):
    """Pixel coordinates and camera depth of one world point.

    Pixel centres sit at integer coordinates. Raises :class:`BehindCamera` when
    the camera-frame depth is not above ``DEPTH_EPSILON``.
    """
    x, y, z = pose.apply(np.asarray(world_point, dtype=np.float64))
    if z <= DEPTH_EPSILON:
        raise BehindCamera(f"point at camera depth {z:.3g}")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy]), float(z)


def project_points(pose: Pose, K: Intrinsics, world_points):
    """Vectorised projection; returns ``(pixels, depths)`` without raising.

    Entries with depth at or below ``DEPTH_EPSILON`` get NaN pixels.
    """
    pc = pose.apply(world_points)
    z = pc[:, 2]
    ok = z > DEPTH_EPSILON
    zs = np.where(ok, z, 1.0)
    pix = np.stack([K.fx * pc[:, 0] / zs + K.cx, K.fy * pc[:, 1] / zs + K.cy], axis=1)
    pix[~ok] = np.nan
    return pix, z


def backproject(pose: Pose, K: Intrinsics, pixels, depths):
    """World points for pixels at the given camera depths."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    pc = np.stack([(pixels[:, 0] - K.cx) / K.fx * depths,
                   (pixels[:, 1] - K.cy) / K.fy * depths,
                   depths], axis=1)
    inv = pose.inverse()
    return inv.apply(pc)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-from-world pose looking from ``eye`` to ``target``.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world
    return Pose(rotmat_to_quat(R), -R @ eye)
